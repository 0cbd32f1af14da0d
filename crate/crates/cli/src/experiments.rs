//! Experiment runners. Each returns a [`Report`] whose CSV bodies depend
//! only on the configuration and seed.

use std::collections::BTreeMap;

use homog_mlmc::cell::{harmonic_mean_realized, homogenize, apparent_tensor_noflow_product, DEFAULT_TOL};
use homog_mlmc::coarse::{
    equal_cost_coarse_samples, grid_transfer, l2_relative_error, mc_solution_separable, mlmc_solution_nonseparable,
    mlmc_solution_separable, weighted_mlmc_solution, weighted_work_ratios, CoarseGrid, NeumannProblem1d,
    SeparableLevel, SolutionField, WeightedPlan,
};
use homog_mlmc::field::{
    Analytic1d, CoefficientSampler, CovarianceSpec, GaussianField, KlBasis, LogNormalField, MacroField,
    ProductFactors2d, ScalarFieldSample, SeedPair,
};
use homog_mlmc::mlmc::{
    dyadic_cost_ratio, equal_cost_mc_samples, mc_expect, mlmc_expect, relative_sq_error, Coupling, ErrorStats,
    EstimatorOutput, FnSampler, LevelPlan,
};
use homog_mlmc::rates::{estimate_beta, pooled_reference, RateEstimate};
use homog_mlmc::{Error, Result, UniformGrid};
use rayon::prelude::*;
use serde_json::json;

use crate::config::*;
use crate::output::{num, Report, Table};

const MAIN: u64 = 0;
const REFERENCE: u64 = 1;
const MACRO: u64 = 2;
const FREQUENCIES: u64 = 3;
const REFERENCE_MACRO: u64 = 4;

/// Stream id for one purpose of an experiment seeded with `base_seed`.
pub fn stream(base_seed: u64, purpose: u64) -> u64 {
    base_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ purpose
}

const SUMMARY_HEADER: [&str; 9] = [
    "estimator",
    "quantity",
    "measure",
    "value",
    "ci_low",
    "ci_high",
    "nb",
    "samples",
    "cost",
];

fn new_report() -> Report {
    Report {
        summary: Table::new(&SUMMARY_HEADER),
        repetitions: Table::new(&["estimator", "quantity", "measure", "repetition", "value"]),
        ..Report::default()
    }
}

/// Mean and 95% normal interval; a single repetition gives a degenerate interval.
pub fn interval(values: &[f64]) -> (f64, f64, f64) {
    if values.len() < 2 {
        let v = values.first().copied().unwrap_or(f64::NAN);
        return (v, v, v);
    }
    let s = ErrorStats::from_errors(values.to_vec()).expect("at least two values");
    (s.relative_mse, s.ci_low, s.ci_high)
}

struct Row<'a> {
    estimator: &'a str,
    quantity: &'a str,
    measure: &'a str,
    samples: String,
    cost: f64,
}

fn record(report: &mut Report, row: Row<'_>, values: Vec<f64>) {
    let (mean, lo, hi) = interval(&values);
    report.summary.push(vec![
        row.estimator.into(),
        row.quantity.into(),
        row.measure.into(),
        num(mean),
        num(lo),
        num(hi),
        values.len().to_string(),
        row.samples,
        num(row.cost),
    ]);
    for (k, v) in values.iter().enumerate() {
        report.repetitions.push(vec![
            row.estimator.into(),
            row.quantity.into(),
            row.measure.into(),
            k.to_string(),
            num(*v),
        ]);
    }
    let key = format!("{}/{}", row.quantity, row.estimator);
    report.metrics.insert(format!("{key}/{}", row.measure), mean);
    report.errors.insert(format!("{key}/{}", row.measure), values);
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn gain(report: &mut Report, quantity: &str, measure: &str, num_est: &str, den_est: &str) {
    let a = report.metrics[&format!("{quantity}/{num_est}/{measure}")];
    let b = report.metrics[&format!("{quantity}/{den_est}/{measure}")];
    report.metrics.insert(format!("{quantity}/gain"), a / b);
    report.derived.insert(format!("gain_{quantity}"), json!(a / b));
}

fn repetitions<T, F>(nb: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    (0..nb as u64).into_par_iter().map(f).collect()
}

fn kl_basis(spec: CovarianceSpec, grid: UniformGrid, tol: f64, cache: Option<&std::path::Path>) -> Result<KlBasis> {
    match cache {
        Some(p) if p.exists() => KlBasis::read_cache(p, spec, grid, tol),
        Some(p) => {
            let b = KlBasis::new(spec, grid, tol)?;
            b.write_cache(p)?;
            Ok(b)
        }
        None => KlBasis::new(spec, grid, tol),
    }
}

fn cells(eta: f64, h: f64) -> usize {
    (eta / h).round() as usize
}

/// Apparent tensors of one realization cropped to the requested nested RVEs.
fn nested_tensors(
    sample: &ScalarFieldSample,
    cells_per_level: &[usize],
    levels: &[usize],
    bc: BcChoice,
    def: DefinitionChoice,
) -> Result<Vec<(usize, Vec<f64>)>> {
    levels
        .iter()
        .map(|&l| {
            let crop = sample.crop(cells_per_level[l - 1])?;
            let (t, _) = homogenize(&crop, bc.into(), def.into(), DEFAULT_TOL)?;
            Ok((l, t.entries))
        })
        .collect()
}

pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<Report> {
    let seed = cfg.base_seed.unwrap_or(0);
    let nb = cfg.nb();
    match kind {
        ExperimentKind::EstimateBeta => run_estimate_beta(&cfg.estimate_beta.clone().unwrap_or_default(), nb, seed),
        ExperimentKind::Coeff1d => run_coeff_1d(
            &cfg.coeff_1d.clone().unwrap_or_else(|| Coeff1dConfig::new(Family1d::Ex2)),
            nb,
            seed,
        ),
        ExperimentKind::Coeff2d => run_coeff_2d(
            &cfg.coeff_2d.clone().unwrap_or_else(|| Coeff2dConfig::new(Family2d::Product)),
            nb,
            seed,
        ),
        ExperimentKind::Solution1d => run_solution_1d(&cfg.solution_1d.clone().unwrap_or_default(), nb, seed),
        ExperimentKind::Solution2d => run_solution_2d(&cfg.solution_2d.clone().unwrap_or_default(), nb, seed),
        ExperimentKind::WeightedCost => run_weighted_cost(&cfg.weighted_cost.clone().unwrap_or_default()),
    }
}

pub fn run_estimate_beta(cfg: &EstimateBetaConfig, nb: usize, seed: u64) -> Result<Report> {
    let eps = cfg.epsilon();
    let l = cfg.eta.len();
    let fits: Vec<RateEstimate> = match cfg.source {
        BetaSource::Synthetic => {
            let c = cfg.synthetic_ln_c.exp();
            let levels: Vec<Vec<Vec<f64>>> = cfg
                .eta
                .iter()
                .zip(&cfg.m)
                .map(|(e, &m)| {
                    let d = (c * (eps / e).powf(cfg.synthetic_beta)).sqrt();
                    (0..m).map(|j| vec![if j % 2 == 0 { 1.0 + d } else { 1.0 - d }]).collect()
                })
                .collect();
            let fit = estimate_beta(&levels, &[1.0], eps, &cfg.eta)?;
            vec![fit; nb]
        }
        BetaSource::Gaussian => {
            let h = cfg.h;
            let n: Vec<usize> = cfg.eta.iter().map(|e| cells(*e, h)).collect();
            let grid = UniformGrid::unit_box(2, cfg.eta[l - 1], n[l - 1])?;
            let spec = CovarianceSpec::new(cfg.sigma, cfg.corr_len, cfg.mean)?;
            let field = GaussianField::from_basis(kl_basis(spec, grid, cfg.mode_tolerance, cfg.kl_cache.as_deref())?);
            let s = stream(seed, MAIN);
            let block: u64 = cfg.m.iter().sum::<usize>() as u64;
            repetitions(nb, |rep| {
                let mut offset = rep * block;
                let mut levels = Vec::with_capacity(l);
                for lvl in 1..=l {
                    let m = cfg.m[lvl - 1] as u64;
                    let samples = (offset..offset + m)
                        .into_par_iter()
                        .map(|j| {
                            let f = field.sample(&SeedPair::shared(j, s))?;
                            let t = nested_tensors(&f, &n, &[lvl], cfg.bc, cfg.definition)?;
                            Ok(t.into_iter().next().expect("one level").1)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    offset += m;
                    levels.push(samples);
                }
                let reference = pooled_reference(&levels)?;
                estimate_beta(&levels, &reference, eps, &cfg.eta)
            })?
        }
    };
    let mut report = new_report();
    report.levels = Table::new(&["repetition", "level", "eta", "m", "ln_eps_over_eta", "ln_msd", "ln_msd_err"]);
    for (rep, fit) in fits.iter().enumerate() {
        for (k, p) in fit.points.iter().enumerate() {
            report.levels.push(vec![
                rep.to_string(),
                (k + 1).to_string(),
                num(cfg.eta[k]),
                cfg.m[k].to_string(),
                num(p.x),
                num(p.y),
                num(p.y_err),
            ]);
        }
    }
    let samples = join(&cfg.m);
    for (quantity, values) in [
        ("beta", fits.iter().map(|f| f.beta).collect::<Vec<_>>()),
        ("ln_c", fits.iter().map(|f| f.ln_c).collect()),
        ("stderr_beta", fits.iter().map(|f| f.stderr_beta).collect()),
    ] {
        record(
            &mut report,
            Row {
                estimator: "fit",
                quantity,
                measure: "estimate",
                samples: samples.clone(),
                cost: 0.0,
            },
            values,
        );
    }
    report.derived.insert("epsilon".into(), json!(eps));
    report.derived.insert("beta".into(), json!(report.metrics["beta/fit/estimate"]));
    report.derived.insert("ln_c".into(), json!(report.metrics["ln_c/fit/estimate"]));
    Ok(report)
}

/// Ex2 and Ex3 limits of `E(A*)` and `E(A*²)` as the RVE grows.
fn analytic_1d_references(family: Family1d, c: f64) -> Option<(f64, f64)> {
    use std::f64::consts::E;
    match family {
        Family1d::Ex1 => None,
        Family1d::Ex2 => Some(((1.0 - 1.0 / E) / (c + 0.25), (1.0 - E.powi(-2)) / 2.0 / (c + 0.25).powi(2))),
        Family1d::Ex3 => Some((2.0 * (4.0f64 / 3.0).ln() / c, 1.0 / (3.0 * c * c))),
    }
}

fn level_table(report: &mut Report, eta: &[f64], m: &[usize], runs: &[EstimatorOutput], entry: usize) {
    report.levels = Table::new(&["level", "eta", "m", "mean_difference", "mean_variance"]);
    let nb = runs.len() as f64;
    for l in 0..eta.len() {
        let mean = runs.iter().map(|r| r.level_contributions[l][entry]).sum::<f64>() / nb;
        let var = runs.iter().map(|r| r.level_variances[l][entry]).sum::<f64>() / nb;
        report.levels.push(vec![
            (l + 1).to_string(),
            num(eta[l]),
            m[l].to_string(),
            num(mean),
            num(var),
        ]);
    }
}

pub fn run_coeff_1d(cfg: &Coeff1dConfig, nb: usize, seed: u64) -> Result<Report> {
    let c = cfg.c();
    let eps = cfg.epsilon();
    let family = match cfg.family {
        Family1d::Ex1 => Analytic1d::ex1(c, cfg.n_terms, eps, stream(seed, FREQUENCIES))?,
        Family1d::Ex2 => Analytic1d::Ex2Stationary { c },
        Family1d::Ex3 => Analytic1d::Ex3NonSeparable { c, epsilon: eps },
    };
    family.validate()?;
    let b = cfg.rve_b();
    let shift = cfg.correlation_shift;
    let make = |s: u64| {
        let family = &family;
        let b = &b;
        FnSampler::new(3, move |level: usize, index: u64| {
            let bl = b[level - 1];
            let r = family.realize(&SeedPair::shared(index, s), bl + shift);
            let x = harmonic_mean_realized(family, &r, 0.0, bl, None);
            let y = harmonic_mean_realized(family, &r, shift, shift + bl, None);
            Ok(vec![x, y, x * y])
        })
    };
    let plan = LevelPlan::new(b.clone(), cfg.m(), cfg.beta(), eps)?;
    let m_hat = equal_cost_mc_samples(&plan, 1);
    let (ref_mean, ref_corr) = match analytic_1d_references(cfg.family, c) {
        Some(r) => r,
        None => {
            let out = mc_expect(&make(stream(seed, REFERENCE)), &plan, cfg.reference_samples, 0, 1)?;
            (out.value[0], out.value[2])
        }
    };
    let ref_mean = cfg.reference.unwrap_or(ref_mean);
    let main = make(stream(seed, MAIN));
    let coupling = match cfg.coupling {
        CouplingChoice::Shared => Coupling::Shared,
        CouplingChoice::Independent => Coupling::Independent,
    };
    let block = plan.m[0].max(m_hat) as u64;
    let runs = repetitions(nb, |rep| {
        let base = rep * block;
        let ml = mlmc_expect(&main, &plan, coupling, base, 1)?;
        let mc = mc_expect(&main, &plan, m_hat, base, 1)?;
        let ind = if cfg.compare_independent {
            Some(mlmc_expect(&main, &plan, Coupling::Independent, base, 1)?)
        } else {
            None
        };
        Ok((ml, mc, ind))
    })?;
    let mut report = new_report();
    let mlmc_name = match coupling {
        Coupling::Shared => "mlmc",
        Coupling::Independent => "mlmc-ind",
    };
    let mut estimators: Vec<(&str, Vec<&EstimatorOutput>)> = vec![
        (mlmc_name, runs.iter().map(|r| &r.0).collect()),
        ("mc", runs.iter().map(|r| &r.1).collect()),
    ];
    if cfg.compare_independent {
        estimators.push(("mlmc-ind", runs.iter().map(|r| r.2.as_ref().expect("computed")).collect()));
    }
    for (quantity, entry, reference) in [("mean", 0usize, ref_mean), ("correlation", 2, ref_corr)] {
        for (name, outs) in &estimators {
            let errs = outs
                .iter()
                .map(|o| relative_sq_error(&[o.value[entry]], &[reference]))
                .collect::<Result<Vec<_>>>()?;
            record(
                &mut report,
                Row {
                    estimator: name,
                    quantity,
                    measure: "relative_mse",
                    samples: join(&outs[0].samples_used),
                    cost: outs[0].cost,
                },
                errs,
            );
        }
        gain(&mut report, quantity, "relative_mse", "mc", mlmc_name);
    }
    let ml_runs: Vec<EstimatorOutput> = runs.iter().map(|r| r.0.clone()).collect();
    level_table(&mut report, &b, &plan.m, &ml_runs, 0);
    report.derived.insert("m_hat".into(), json!(m_hat));
    report.derived.insert("epsilon".into(), json!(eps));
    report.derived.insert("rve_b".into(), json!(b));
    report.derived.insert("m".into(), json!(plan.m));
    report.derived.insert("reference_mean".into(), json!(ref_mean));
    report.derived.insert("reference_correlation".into(), json!(ref_corr));
    if let Analytic1d::Ex1Separable { freqs, .. } = &family {
        report.derived.insert("frequencies".into(), json!(freqs));
    }
    Ok(report)
}

pub fn run_coeff_2d(cfg: &Coeff2dConfig, nb: usize, seed: u64) -> Result<Report> {
    match cfg.family {
        Family2d::Product => run_coeff_2d_product(cfg, nb, seed),
        Family2d::SeparableKl => run_coeff_2d_separable(cfg, nb, seed),
    }
}

fn run_coeff_2d_product(cfg: &Coeff2dConfig, nb: usize, seed: u64) -> Result<Report> {
    let eps = cfg.epsilon();
    let factors = ProductFactors2d::new(cfg.c, eps)?;
    let eta = cfg.eta.clone();
    let q = cfg.quadrature_per_epsilon as f64;
    let make = |s: u64| {
        let eta = &eta;
        FnSampler::new(2, move |level: usize, index: u64| {
            let omega = factors.realize(&SeedPair::shared(index, s));
            let e = eta[level - 1];
            let n = (e / eps * q).ceil() as usize;
            let t = apparent_tensor_noflow_product(
                |x| 1.0 / factors.a1_inv(omega, x),
                |x| factors.a2(omega, x),
                [0.0, 0.0],
                e,
                n,
            )?;
            let a11 = t.get(0, 0);
            if !(a11 > 0.0 && a11.is_finite()) {
                return Err(Error::Coercivity { cell: 0, value: a11 });
            }
            Ok(vec![a11, a11 * a11])
        })
    };
    let plan = LevelPlan::new(eta.clone(), cfg.m(), cfg.beta(), eps)?;
    let m_hat = equal_cost_mc_samples(&plan, 2);
    let reference = mc_expect(&make(stream(seed, REFERENCE)), &plan, cfg.reference_samples, 0, 2)?.value;
    let main = make(stream(seed, MAIN));
    let block = plan.m[0].max(m_hat) as u64;
    let runs = repetitions(nb, |rep| {
        let base = rep * block;
        Ok((
            mlmc_expect(&main, &plan, Coupling::Shared, base, 2)?,
            mc_expect(&main, &plan, m_hat, base, 2)?,
        ))
    })?;
    let mut report = new_report();
    for (quantity, range) in [("mean", 0..1), ("correlation", 1..2)] {
        for (name, pick) in [("mlmc", 0usize), ("mc", 1)] {
            let outs: Vec<&EstimatorOutput> = runs.iter().map(|r| if pick == 0 { &r.0 } else { &r.1 }).collect();
            let errs = outs
                .iter()
                .map(|o| relative_sq_error(&o.value[range.clone()], &reference[range.clone()]))
                .collect::<Result<Vec<_>>>()?;
            record(
                &mut report,
                Row {
                    estimator: name,
                    quantity,
                    measure: "relative_mse",
                    samples: join(&outs[0].samples_used),
                    cost: outs[0].cost,
                },
                errs,
            );
        }
        gain(&mut report, quantity, "relative_mse", "mc", "mlmc");
    }
    let ml_runs: Vec<EstimatorOutput> = runs.iter().map(|r| r.0.clone()).collect();
    level_table(&mut report, &eta, &plan.m, &ml_runs, 0);
    report.derived.insert("m_hat".into(), json!(m_hat));
    report.derived.insert("epsilon".into(), json!(eps));
    report.derived.insert("reference".into(), json!(reference));
    Ok(report)
}

fn separable_micro(
    cfg: &Coeff2dConfig,
) -> Result<(GaussianField, Vec<usize>)> {
    let l = cfg.eta.len();
    let n: Vec<usize> = cfg.eta.iter().map(|e| cells(*e, cfg.h)).collect();
    let grid = UniformGrid::unit_box(2, cfg.eta[l - 1], n[l - 1])?;
    let spec = CovarianceSpec::new(cfg.sigma, cfg.corr_len, cfg.mean)?;
    let field = GaussianField::from_basis(kl_basis(spec, grid, cfg.mode_tolerance, cfg.kl_cache.as_deref())?);
    Ok((field, n))
}

/// `B*_l(ω′_j)[0][0]` for `j` in `indices` at every level `l` with `j - start < counts[l]`.
fn micro_table(
    field: &dyn CoefficientSampler,
    n: &[usize],
    counts: &[usize],
    start: u64,
    s: u64,
    bc: BcChoice,
    def: DefinitionChoice,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let total = *counts.iter().max().expect("levels") as u64;
    let rows: Vec<Vec<(usize, Vec<f64>)>> = (0..total)
        .into_par_iter()
        .map(|j| {
            let needed: Vec<usize> = (1..=counts.len()).filter(|&l| j < counts[l - 1] as u64).collect();
            let f = field.sample(&SeedPair::shared(start + j, s))?;
            nested_tensors(&f, n, &needed, bc, def)
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); counts.len()];
    for row in rows {
        for (l, t) in row {
            out[l - 1].push(t);
        }
    }
    Ok(out)
}

fn run_coeff_2d_separable(cfg: &Coeff2dConfig, nb: usize, seed: u64) -> Result<Report> {
    let eps = cfg.epsilon();
    let l = cfg.eta.len();
    let (field, n) = separable_micro(cfg)?;
    let plan = LevelPlan::new(cfg.eta.clone(), cfg.m(), cfg.beta(), eps)?;
    let m_hat = equal_cost_mc_samples(&plan, 2);
    let refs = micro_table(&field, &n, &cfg.m_ref, 0, stream(seed, REFERENCE), cfg.bc, cfg.definition)?;
    let pooled: f64 = refs
        .iter()
        .map(|lvl| lvl.iter().map(|t| t[0]).sum::<f64>() / lvl.len() as f64)
        .sum::<f64>()
        / l as f64;
    // E[exp(ω)] = e^{1/2} for ω ~ N(0, 1).
    let reference = 0.5f64.exp() * pooled;
    let mut counts = plan.m.clone();
    counts[l - 1] = counts[l - 1].max(m_hat);
    let block = counts[0].max(m_hat) as u64;
    let macro_stream = stream(seed, MACRO);
    let n_sets = cfg.macro_samples as u64;
    let runs = repetitions(nb, |rep| {
        let micro = micro_table(&field, &n, &counts, rep * block, stream(seed, MAIN), cfg.bc, cfg.definition)?;
        let b = |lvl: usize, j: usize| micro[lvl - 1][j][0];
        let sets: Vec<(f64, f64)> = (0..n_sets)
            .into_par_iter()
            .map(|i| {
                let a = |j: usize| {
                    let s = SeedPair::shared((rep * n_sets + i) * block + j as u64, macro_stream);
                    MacroField::ExpGaussian.value_with(&MacroField::ExpGaussian.realize(&s), &[0.0])
                };
                let mut ml = 0.0;
                for lvl in 1..=l {
                    let m = plan.m[lvl - 1];
                    let s: f64 = (0..m)
                        .map(|j| a(j) * (b(lvl, j) - if lvl > 1 { b(lvl - 1, j) } else { 0.0 }))
                        .sum();
                    ml += s / m as f64;
                }
                let mc = (0..m_hat).map(|j| a(j) * b(l, j)).sum::<f64>() / m_hat as f64;
                (((ml - reference) / reference).powi(2), ((mc - reference) / reference).powi(2))
            })
            .collect();
        let k = sets.len() as f64;
        Ok((sets.iter().map(|s| s.0).sum::<f64>() / k, sets.iter().map(|s| s.1).sum::<f64>() / k))
    })?;
    let mut report = new_report();
    let d = 2;
    record(
        &mut report,
        Row {
            estimator: "mlmc",
            quantity: "a11",
            measure: "relative_mse",
            samples: join(&plan.m),
            cost: plan.cost_of(&plan.m, d),
        },
        runs.iter().map(|r| r.0).collect(),
    );
    record(
        &mut report,
        Row {
            estimator: "mc",
            quantity: "a11",
            measure: "relative_mse",
            samples: m_hat.to_string(),
            cost: m_hat as f64 * plan.dof(l, d),
        },
        runs.iter().map(|r| r.1).collect(),
    );
    gain(&mut report, "a11", "relative_mse", "mc", "mlmc");
    report.levels = Table::new(&["level", "eta", "m", "m_ref", "reference_b11_mean"]);
    for k in 0..l {
        let mean = refs[k].iter().map(|t| t[0]).sum::<f64>() / refs[k].len() as f64;
        report.levels.push(vec![
            (k + 1).to_string(),
            num(cfg.eta[k]),
            plan.m[k].to_string(),
            cfg.m_ref[k].to_string(),
            num(mean),
        ]);
    }
    report.derived.insert("m_hat".into(), json!(m_hat));
    report.derived.insert("epsilon".into(), json!(eps));
    report.derived.insert("reference".into(), json!(reference));
    report.derived.insert("kl_modes".into(), json!(field.basis().mode_count()));
    Ok(report)
}

pub fn run_solution_1d(cfg: &Solution1dConfig, nb: usize, seed: u64) -> Result<Report> {
    let l = cfg.rve_b.len();
    let grids = CoarseGrid::hierarchy(1, cfg.base_cells, l)?;
    let rve: Vec<(f64, f64)> = cfg.rve_b.iter().map(|b| (0.0, *b)).collect();
    let problem = NeumannProblem1d::new(cfg.c, cfg.epsilon(), rve, grids.clone(), stream(seed, MAIN))?;
    let big_m = cfg.big_m();
    let m_hat = equal_cost_coarse_samples(&grids, &big_m);
    let finest = grids[l - 1];
    let reference = problem.reference_field(&finest);
    let all: Vec<usize> = (1..=l).collect();
    let plan = cfg.weights.clone().map(|w| WeightedPlan::new(w, big_m.clone())).transpose()?;
    let block = big_m[0].max(m_hat) as u64;
    let runs = repetitions(nb, |rep| {
        let base = rep * block;
        let ml = mlmc_solution_nonseparable(&problem, &all, &big_m, base)?;
        let mc = mlmc_solution_nonseparable(&problem, &[l], &[m_hat], base)?;
        let mut e = vec![
            l2_relative_error(&ml.value, &reference)?,
            l2_relative_error(&mc.value, &reference)?,
        ];
        if let Some(p) = &plan {
            e.push(l2_relative_error(&weighted_mlmc_solution(&problem, p, base)?.value, &reference)?);
        }
        Ok(e)
    })?;
    let mut report = new_report();
    let coarse_cost = |m: &[usize], g: &[CoarseGrid]| -> f64 { g.iter().zip(m).map(|(g, m)| *m as f64 / g.h()).sum() };
    let mut names = vec![
        ("mlmc", join(&big_m), coarse_cost(&big_m, &grids)),
        ("mc", m_hat.to_string(), coarse_cost(&[m_hat], &[finest])),
    ];
    if plan.is_some() {
        names.push(("weighted", join(&big_m), coarse_cost(&big_m, &grids)));
    }
    for (k, (name, samples, cost)) in names.into_iter().enumerate() {
        let e: Vec<f64> = runs.iter().map(|r| r[k]).collect();
        record(
            &mut report,
            Row {
                estimator: name,
                quantity: "solution",
                measure: "relative_l2",
                samples: samples.clone(),
                cost,
            },
            e.clone(),
        );
        record(
            &mut report,
            Row {
                estimator: name,
                quantity: "solution",
                measure: "relative_mse",
                samples,
                cost,
            },
            e.iter().map(|x| x * x).collect(),
        );
    }
    gain(&mut report, "solution", "relative_mse", "mc", "mlmc");
    report.levels = Table::new(&["level", "rve_b", "H", "M"]);
    for k in 0..l {
        report.levels.push(vec![
            (k + 1).to_string(),
            num(cfg.rve_b[k]),
            num(grids[k].h()),
            big_m[k].to_string(),
        ]);
    }
    report.derived.insert("M_hat".into(), json!(m_hat));
    report.derived.insert("epsilon".into(), json!(cfg.epsilon()));
    report.derived.insert("reference_constant".into(), json!(problem.reference_constant()));
    Ok(report)
}

/// Per-level means of `B*` entries over the first `counts[l]` samples from `start`.
fn micro_means(
    field: &dyn CoefficientSampler,
    n: &[usize],
    counts: &[usize],
    start: u64,
    s: u64,
    bc: BcChoice,
    def: DefinitionChoice,
) -> Result<Vec<Vec<f64>>> {
    let table = micro_table(field, n, counts, start, s, bc, def)?;
    Ok(table
        .into_iter()
        .map(|lvl| {
            let k = lvl.len() as f64;
            let mut mean = vec![0.0; lvl[0].len()];
            for t in &lvl {
                for (m, v) in mean.iter_mut().zip(t) {
                    *m += v;
                }
            }
            mean.into_iter().map(|v| v / k).collect()
        })
        .collect())
}

pub fn run_solution_2d(cfg: &Solution2dConfig, nb: usize, seed: u64) -> Result<Report> {
    let l = cfg.eta.len();
    let n: Vec<usize> = cfg.eta.iter().map(|e| cells(*e, cfg.h)).collect();
    let rve_grid = UniformGrid::unit_box(2, cfg.eta[l - 1], n[l - 1])?;
    let spec = CovarianceSpec::new(cfg.sigma, cfg.corr_len, 0.0)?;
    let field = LogNormalField::from_log_field(GaussianField::from_basis(kl_basis(
        spec,
        rve_grid,
        cfg.mode_tolerance,
        cfg.kl_cache.as_deref(),
    )?));
    let grids = CoarseGrid::hierarchy(2, cfg.base_cells, l)?;
    let finest = grids[l - 1];
    let scale = cfg.source_scale;
    let f = move |x: [f64; 2]| scale * (x[0] + x[1]);
    let plan = LevelPlan::new(cfg.eta.clone(), cfg.m.clone(), 1.0, cfg.epsilon())?;
    let m_hat = equal_cost_mc_samples(&plan, 2);
    let big_m_hat = equal_cost_coarse_samples(&grids, &cfg.big_m);

    let ref_means = micro_means(
        &field,
        &n,
        &vec![cfg.reference_micro; l],
        0,
        stream(seed, REFERENCE),
        cfg.bc,
        cfg.definition,
    )?;
    let mut reference = SolutionField::zeros(finest);
    for k in 0..l {
        let lvl = SeparableLevel {
            grid: grids[k],
            samples: cfg.reference_macro,
            micro_mean: ref_means[k].clone(),
        };
        let u = mc_solution_separable(MacroField::SineAbs, &lvl, &f, stream(seed, REFERENCE_MACRO), 0)?;
        let u = grid_transfer(&u.value, &finest)?;
        for (r, v) in reference.values.iter_mut().zip(&u.values) {
            *r += v / l as f64;
        }
    }

    let mut counts = cfg.m.clone();
    counts[l - 1] = counts[l - 1].max(m_hat);
    let micro_block = counts[0].max(m_hat) as u64;
    let macro_block = cfg.big_m[0].max(big_m_hat) as u64;
    let runs = repetitions(nb, |rep| {
        let table = micro_table(
            &field,
            &n,
            &counts,
            rep * micro_block,
            stream(seed, MAIN),
            cfg.bc,
            cfg.definition,
        )?;
        let mean_of = |lvl: usize, m: usize| -> Vec<f64> {
            let mut out = vec![0.0; 4];
            for t in &table[lvl - 1][..m] {
                for (o, v) in out.iter_mut().zip(t) {
                    *o += v / m as f64;
                }
            }
            out
        };
        let levels: Vec<SeparableLevel> = (1..=l)
            .map(|k| SeparableLevel {
                grid: grids[k - 1],
                samples: cfg.big_m[k - 1],
                micro_mean: mean_of(k, cfg.m[k - 1]),
            })
            .collect();
        let base = rep * macro_block;
        let ml = mlmc_solution_separable(MacroField::SineAbs, &levels, &f, stream(seed, MACRO), base)?;
        let mc_level = SeparableLevel {
            grid: finest,
            samples: big_m_hat,
            micro_mean: mean_of(l, m_hat),
        };
        let mc = mc_solution_separable(MacroField::SineAbs, &mc_level, &f, stream(seed, MACRO), base)?;
        Ok((l2_relative_error(&ml.value, &reference)?, l2_relative_error(&mc.value, &reference)?))
    })?;
    let mut report = new_report();
    let rve_cost = |m: usize, k: usize| m as f64 * (cfg.eta[k] / cfg.epsilon()).powi(2);
    let ml_cost: f64 = (0..l).map(|k| rve_cost(cfg.m[k], k)).sum();
    for (name, pick, samples, cost) in [
        ("mlmc", 0usize, format!("{} / {}", join(&cfg.m), join(&cfg.big_m)), ml_cost),
        ("mc", 1, format!("{m_hat} / {big_m_hat}"), rve_cost(m_hat, l - 1)),
    ] {
        let e: Vec<f64> = runs.iter().map(|r| if pick == 0 { r.0 } else { r.1 }).collect();
        for (measure, vals) in [("relative_l2", e.clone()), ("relative_mse", e.iter().map(|x| x * x).collect())] {
            record(
                &mut report,
                Row {
                    estimator: name,
                    quantity: "solution",
                    measure,
                    samples: samples.clone(),
                    cost,
                },
                vals,
            );
        }
    }
    let ratio = report.metrics["solution/mlmc/relative_l2"] / report.metrics["solution/mc/relative_l2"];
    report.metrics.insert("solution/error_ratio".into(), ratio);
    report.derived.insert("error_ratio".into(), json!(ratio));
    report.levels = Table::new(&["level", "eta", "H", "m", "M", "reference_b11", "reference_b22"]);
    for k in 0..l {
        report.levels.push(vec![
            (k + 1).to_string(),
            num(cfg.eta[k]),
            num(grids[k].h()),
            cfg.m[k].to_string(),
            cfg.big_m[k].to_string(),
            num(ref_means[k][0]),
            num(ref_means[k][3]),
        ]);
    }
    report.derived.insert("m_hat".into(), json!(m_hat));
    report.derived.insert("M_hat".into(), json!(big_m_hat));
    report.derived.insert("epsilon".into(), json!(cfg.epsilon()));
    report.derived.insert("reference_micro_means".into(), json!(ref_means));
    Ok(report)
}

pub fn run_weighted_cost(cfg: &WeightedCostConfig) -> Result<Report> {
    let mut report = Report {
        summary: Table::new(&["estimator", "quantity", "levels", "value"]),
        repetitions: Table::new(&["estimator", "quantity", "measure", "repetition", "value"]),
        levels: Table::new(&["levels", "H_L"]),
        ..Report::default()
    };
    let mut curves: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &beta in &cfg.betas {
        for big_l in 1..=cfg.max_levels {
            let coef = dyadic_cost_ratio(beta, big_l, cfg.dim, cfg.eps_factor, None);
            let h: Vec<f64> = (0..big_l).map(|k| cfg.h1 * 0.5f64.powi(k as i32)).collect();
            let eps = 2f64.powi(1 - big_l as i32) / cfg.eps_factor;
            let w = weighted_work_ratios(beta, &h, eps)?;
            for (kind, v) in [("coefficient", coef), ("weighted-rve", w.rve_ratio), ("weighted-coarse", w.coarse_ratio)] {
                report.summary.push(vec![kind.into(), num(beta), big_l.to_string(), num(v)]);
                report.metrics.insert(format!("{kind}/beta={beta}/L={big_l}"), v);
                curves.entry(format!("{kind}/beta={beta}")).or_default().push(v);
            }
        }
    }
    for big_l in 1..=cfg.max_levels {
        report
            .levels
            .push(vec![big_l.to_string(), num(cfg.h1 * 0.5f64.powi(big_l as i32 - 1))]);
    }
    report.derived.insert("curves".into(), json!(curves));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_beta_is_recovered() {
        let cfg = EstimateBetaConfig {
            source: BetaSource::Synthetic,
            epsilon: Some(0.01),
            eta: vec![0.125, 0.25, 0.5, 1.0],
            m: vec![4, 4, 4, 4],
            ..EstimateBetaConfig::default()
        };
        let r = run_estimate_beta(&cfg, 1, 0).unwrap();
        assert!((r.metrics["beta/fit/estimate"] - 1.53).abs() < 1e-10);
        assert!((r.metrics["ln_c/fit/estimate"] - 1.059).abs() < 1e-10);
    }

    #[test]
    fn ex2_references() {
        let (m, c2) = analytic_1d_references(Family1d::Ex2, 1.0).unwrap();
        assert!((m - (1.0 - (-1f64).exp()) / 1.25).abs() < 1e-15);
        // E[e^{-2ω}] = (1 - e^{-2}) / 2 for ω ~ U[0, 1].
        let q: f64 = (0..100000).map(|k| (-2.0 * (k as f64 + 0.5) / 1e5).exp()).sum::<f64>() / 1e5;
        assert!((c2 - q / 1.5625).abs() < 1e-9);
        let (m3, s3) = analytic_1d_references(Family1d::Ex3, 2.0).unwrap();
        let qm: f64 = (0..100000).map(|k| 1.0 / (2.0 * (1.5 + 0.5 * (k as f64 + 0.5) / 1e5))).sum::<f64>() / 1e5;
        let qs: f64 = (0..100000)
            .map(|k| (2.0 * (1.5 + 0.5 * (k as f64 + 0.5) / 1e5)).powi(-2))
            .sum::<f64>()
            / 1e5;
        assert!((m3 - qm).abs() < 1e-9 && (s3 - qs).abs() < 1e-9);
    }

    #[test]
    fn small_coeff_1d_runs() {
        let mut c = Coeff1dConfig::new(Family1d::Ex3);
        c.m_last = 5;
        c.compare_independent = true;
        let r = run_coeff_1d(&c, 3, 7).unwrap();
        assert_eq!(r.errors["mean/mlmc/relative_mse"].len(), 3);
        assert!(r.metrics.contains_key("mean/mlmc-ind/relative_mse"));
        assert!(r.metrics["mean/gain"] > 0.0);
    }

    #[test]
    fn weighted_cost_single_level_is_even() {
        let r = run_weighted_cost(&WeightedCostConfig {
            max_levels: 1,
            ..WeightedCostConfig::default()
        })
        .unwrap();
        for beta in [1.0, 2.0, 3.0] {
            for kind in ["coefficient", "weighted-rve", "weighted-coarse"] {
                let v = r.metrics[&format!("{kind}/beta={beta}/L=1")];
                assert!((v - 1.0).abs() < 1e-12, "{kind} {beta}: {v}");
            }
        }
    }
}
