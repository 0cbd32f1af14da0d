//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::f64::consts::E;
use std::time::Instant;

use homog_mlmc::cell::{harmonic_mean_realized, homogenize, BoundaryCondition, TensorDefinition};
use homog_mlmc::coarse::{blocked_mlmc_solution, weighted_mlmc_solution, CoarseGrid, NeumannProblem1d, WeightedPlan};
use homog_mlmc::field::{Analytic1d, ScalarFieldSample, SeedPair};
use homog_mlmc::mlmc::{dyadic_cost_ratio, mc_expect, FnSampler, LevelPlan};
use homog_mlmc::UniformGrid;
use homog_mlmc_cli::config::*;
use homog_mlmc_cli::experiments::*;
use homog_mlmc_cli::run_experiment;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn ex2(levels: usize, m: Vec<usize>) -> Coeff1dConfig {
    let mut c = Coeff1dConfig::new(Family1d::Ex2);
    c.levels = levels;
    c.m = Some(m);
    c
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c1_ex2_gain() -> Outcome {
    let r = run_coeff_1d(&ex2(3, vec![1600, 800, 400]), 200, 11).unwrap();
    let (ml, mc) = (r.metrics["mean/mlmc/relative_mse"], r.metrics["mean/mc/relative_mse"]);
    outcome(
        ml <= mc / 1.2,
        format!("relMSE mlmc {ml:.3e}, mc {mc:.3e}, gain {:.3} (need >= 1.2)", mc / ml),
    )
}

fn c2_gain_grows() -> Outcome {
    let g3 = run_coeff_1d(&ex2(3, vec![1600, 800, 400]), 200, 12).unwrap().metrics["mean/gain"];
    let g5 = run_coeff_1d(&ex2(5, vec![6400, 3200, 1600, 800, 400]), 200, 12).unwrap().metrics["mean/gain"];
    outcome(g5 > g3, format!("gain L=3 {g3:.3}, L=5 {g5:.3}"))
}

fn c3_synthetic_beta() -> Outcome {
    let cfg = EstimateBetaConfig {
        source: BetaSource::Synthetic,
        ..EstimateBetaConfig::default()
    };
    let r = run_estimate_beta(&cfg, 1, 0).unwrap();
    let (b, c) = (r.metrics["beta/fit/estimate"], r.metrics["ln_c/fit/estimate"]);
    outcome(
        (b - 1.53).abs() <= 1e-10 && (c - 1.059).abs() <= 1e-10,
        format!("beta {b:.12}, ln C {c:.12}"),
    )
}

fn c4_gaussian_beta() -> Outcome {
    let cfg = EstimateBetaConfig {
        epsilon: Some(0.04 / 2f64.sqrt()),
        ..EstimateBetaConfig::default()
    };
    let r = run_estimate_beta(&cfg, 1, 4).unwrap();
    let b = r.metrics["beta/fit/estimate"];
    outcome((0.65..=1.45).contains(&b), format!("beta {b:.4} (need [0.65, 1.45])"))
}

fn c5_constant_field() -> Outcome {
    let c = 3.7;
    let mut worst: f64 = 0.0;
    for dim in [1, 2] {
        let g = UniformGrid::unit_box(dim, 0.5, 16).unwrap();
        for bc in [BoundaryCondition::DirichletLinear, BoundaryCondition::DirichletNoFlow] {
            for def in [TensorDefinition::FluxAverage, TensorDefinition::EnergyAverage] {
                let (t, _) = homogenize(&ScalarFieldSample::constant(g.clone(), c), bc, def, 1e-12).unwrap();
                for i in 0..dim {
                    for j in 0..dim {
                        let want = if i == j { c } else { 0.0 };
                        worst = worst.max((t.get(i, j) - want).abs());
                    }
                }
            }
        }
    }
    outcome(worst <= 1e-10, format!("max |A* - cI| = {worst:.2e}"))
}

fn c6_fv_convergence() -> Outcome {
    let cases = [
        ("ex1", Analytic1d::ex1(1.0, 20, 1.0, 6).unwrap()),
        ("ex3", Analytic1d::Ex3NonSeparable { c: 2.0 * E, epsilon: 0.1 }),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, fam) in cases {
        let r = fam.realize(&SeedPair::shared(3, 17), 1.0);
        let exact = harmonic_mean_realized(&fam, &r, 0.0, 1.0, None);
        let mut pts = Vec::new();
        for n in [128usize, 256, 512] {
            let h = 1.0 / n as f64;
            let g = UniformGrid::unit_box(1, 1.0, n).unwrap();
            let f = fam.sample_on(&r, &g).unwrap();
            let (t, _) = homogenize(&f, BoundaryCondition::DirichletLinear, TensorDefinition::FluxAverage, 1e-13).unwrap();
            let err = ((t.get(0, 0) - exact) / exact).abs();
            pass &= err <= 2.0 * h;
            pts.push((h.ln(), err.max(1e-300).ln()));
        }
        let slope = (pts[2].1 - pts[0].1) / (pts[2].0 - pts[0].0);
        pass &= slope >= 0.9;
        detail.push(format!(
            "{name}: errors {:.2e} {:.2e} {:.2e}, slope {slope:.2}",
            pts[0].1.exp(),
            pts[1].1.exp(),
            pts[2].1.exp()
        ));
    }
    outcome(pass, detail.join("; "))
}

fn c7_variance_identity() -> Outcome {
    let s = stream(7, 0);
    let sampler = FnSampler::new(1, move |_, index| Ok(vec![SeedPair::shared(index, s).micro_uniform(0)]));
    let plan = LevelPlan::new(vec![1.0], vec![1], 1.0, 0.1).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for m in [10usize, 100] {
        let errs: Vec<f64> = (0..5000u64)
            .map(|rep| (mc_expect(&sampler, &plan, m, rep * m as u64, 1).unwrap().value[0] - 0.5).powi(2))
            .collect();
        let got = mean(&errs);
        let want = 1.0 / 12.0 / m as f64;
        let rel = (got - want).abs() / want;
        pass &= rel <= 0.1;
        detail.push(format!("M={m}: {got:.4e} vs {want:.4e} ({:.1}%)", 100.0 * rel));
    }
    outcome(pass, detail.join("; "))
}

fn neumann() -> (NeumannProblem1d, Vec<usize>) {
    let grids = CoarseGrid::hierarchy(1, 4, 3).unwrap();
    let rve = vec![(0.0, 0.125), (0.0, 0.25), (0.0, 0.5)];
    (NeumannProblem1d::new(2.0 * E, 0.00125, rve, grids, 21).unwrap(), vec![64, 16, 4])
}

fn c8_weighted_equals_blocked() -> Outcome {
    let (p, m) = neumann();
    let plan = WeightedPlan::new(vec![1.0; 3], m.clone()).unwrap();
    let w = weighted_mlmc_solution(&p, &plan, 5).unwrap();
    let b = blocked_mlmc_solution(&p, &m, 5).unwrap();
    let scale = b.value.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let diff = w
        .value
        .values
        .iter()
        .zip(&b.value.values)
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
        / scale;
    outcome(diff <= 1e-12, format!("max relative difference {diff:.2e}"))
}

fn c9_rve_counter() -> Outcome {
    let (p, m) = neumann();
    let plan = WeightedPlan::new(vec![1.0, 0.6, 0.3], m.clone()).unwrap();
    p.reset_counter();
    weighted_mlmc_solution(&p, &plan, 0).unwrap();
    let n: Vec<u64> = (0..3).map(|l| p.grids[l].cells() as u64).collect();
    let want: u64 = (0..3)
        .map(|l| (m[l] as u64 - m.get(l + 1).copied().unwrap_or(0) as u64) * n[l])
        .sum();
    outcome(p.rve_solves() == want, format!("counted {}, expected {want}", p.rve_solves()))
}

fn c10_cost_ratio() -> Outcome {
    let mut bad = Vec::new();
    for big_l in 1..=15 {
        let r: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|b| dyadic_cost_ratio(*b, big_l, 2, 10.0, None)).collect();
        if big_l >= 2 && r.iter().any(|x| !(*x < 1.0)) {
            bad.push(format!("L={big_l} ratios {:.4} {:.4} {:.4} not < 1", r[0], r[1], r[2]));
        }
        if r.windows(2).any(|w| w[1] > w[0] + 1e-15) {
            bad.push(format!("L={big_l} not monotone in beta: {r:?}"));
        }
    }
    let tail = dyadic_cost_ratio(2.0, 15, 2, 10.0, None);
    if bad.is_empty() {
        outcome(true, format!("beta=2, L=15 ratio {tail:.3e}"))
    } else {
        outcome(false, bad.join("; "))
    }
}

fn c11_solution_2d() -> Outcome {
    let cfg = Solution2dConfig {
        reference_macro: 200,
        reference_micro: 20,
        ..Solution2dConfig::default()
    };
    let r = run_solution_2d(&cfg, 20, 31).unwrap();
    let (ml, mc) = (r.metrics["solution/mlmc/relative_l2"], r.metrics["solution/mc/relative_l2"]);
    outcome(ml / mc < 0.7, format!("mean e_mlmc {ml:.4}, mean e_mc {mc:.4}, ratio {:.3} (need < 0.7)", ml / mc))
}

fn c12_coupling() -> Outcome {
    let mut c = ex2(3, vec![1600, 400, 100]);
    c.compare_independent = true;
    let r = run_coeff_1d(&c, 200, 13).unwrap();
    let s = &r.errors["mean/mlmc/relative_mse"];
    let i = &r.errors["mean/mlmc-ind/relative_mse"];
    let d: Vec<f64> = s.iter().zip(i).map(|(a, b)| a - b).collect();
    let md = mean(&d);
    let se = (d.iter().map(|x| (x - md).powi(2)).sum::<f64>() / (d.len() - 1) as f64 / d.len() as f64).sqrt();
    let (ms, mi) = (mean(s), mean(i));
    outcome(
        ms <= mi + 3.0 * se,
        format!("shared {ms:.3e}, independent {mi:.3e}, paired SE {se:.2e}"),
    )
}

fn c13_thread_invariance() -> Outcome {
    let mut configs = Vec::new();
    let mut c1 = ExperimentConfig::defaults_for(ExperimentKind::Coeff1d);
    c1.nb = Some(6);
    let mut ex1 = Coeff1dConfig::new(Family1d::Ex1);
    ex1.m_last = 4;
    ex1.reference_samples = 50;
    c1.coeff_1d = Some(ex1);
    configs.push((ExperimentKind::Coeff1d, c1));
    let mut b = ExperimentConfig::defaults_for(ExperimentKind::EstimateBeta);
    b.nb = Some(2);
    b.estimate_beta = Some(EstimateBetaConfig {
        h: 1.0 / 64.0,
        eta: vec![0.0625, 0.125, 0.25],
        m: vec![8, 4, 2],
        ..EstimateBetaConfig::default()
    });
    configs.push((ExperimentKind::EstimateBeta, b));
    let mut s2 = ExperimentConfig::defaults_for(ExperimentKind::Solution2d);
    s2.nb = Some(3);
    s2.solution_2d = Some(Solution2dConfig {
        h: 1.0 / 64.0,
        base_cells: 4,
        big_m: vec![4, 4, 2],
        m: vec![6, 4, 2],
        reference_macro: 8,
        reference_micro: 3,
        ..Solution2dConfig::default()
    });
    configs.push((ExperimentKind::Solution2d, s2));
    let mut s1 = ExperimentConfig::defaults_for(ExperimentKind::Solution1d);
    s1.nb = Some(4);
    configs.push((ExperimentKind::Solution1d, s1));
    let mut p = ExperimentConfig::defaults_for(ExperimentKind::Coeff2d);
    p.nb = Some(4);
    let mut pc = Coeff2dConfig::new(Family2d::Product);
    pc.m_last = 2;
    pc.reference_samples = 40;
    p.coeff_2d = Some(pc);
    configs.push((ExperimentKind::Coeff2d, p));

    let mut mismatches = Vec::new();
    for (kind, cfg) in &configs {
        let bodies: Vec<[String; 3]> = [1usize, 2, 8]
            .iter()
            .map(|&t| {
                let r = run_experiment(*kind, cfg, t).unwrap();
                [
                    r.summary.to_csv().unwrap(),
                    r.repetitions.to_csv().unwrap(),
                    r.levels.to_csv().unwrap(),
                ]
            })
            .collect();
        if bodies.windows(2).any(|w| w[0] != w[1]) {
            mismatches.push(kind.name());
        }
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{} experiments identical at 1, 2, 8 threads", configs.len())
        } else {
            format!("differs: {mismatches:?}")
        },
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("ex2 mlmc gain at L=3", c1_ex2_gain),
        ("ex2 gain grows with L", c2_gain_grows),
        ("synthetic beta recovery", c3_synthetic_beta),
        ("gaussian field beta", c4_gaussian_beta),
        ("constant coefficient", c5_constant_field),
        ("1d fv convergence", c6_fv_convergence),
        ("variance identity", c7_variance_identity),
        ("weighted alpha=1 equals blocked", c8_weighted_equals_blocked),
        ("rve solve counter", c9_rve_counter),
        ("cost ratio figure", c10_cost_ratio),
        ("2d solution error ratio", c11_solution_2d),
        ("shared vs independent coupling", c12_coupling),
        ("thread-count invariance", c13_thread_invariance),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            k + 1,
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
