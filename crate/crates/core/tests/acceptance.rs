//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! with a failure status if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use can_core::abstraction::interlacing_check;
use can_core::can_graph::{
    adjacency, check_consistency, degree, incidence, kernel_multiplicity,
    reachability_from_coarsest,
};
use can_core::diffusion::{gaussian_cochain, is_fixed_point, WeightProfile};
use can_core::harness::{
    gen_can_instance, gen_local_instance, run_can_benchmark, run_local_benchmark, CanConfig,
    LocalConfig, RunReport, Topology,
};
use can_core::numerics::{random_stiefel, GaussianMeasure, MixtureMeasure, DEFAULT_RANK_TOL};
use can_core::spectral::{
    augmented_lagrangian, build_local_problem, solve, update_v, SolverConfig, SolverState,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(report: &RunReport, group: &str, metric: &str) -> f64 {
    report.stat(group, metric).map_or(f64::NAN, |s| s.median)
}

fn errors(report: &RunReport) -> usize {
    report
        .records
        .iter()
        .filter(|r| r.metric == "error")
        .count()
}

fn local_suite() -> Outcome {
    let cfg = LocalConfig::standard(SEED);
    let start = Instant::now();
    let report = run_local_benchmark(&cfg).expect("local benchmark runs");
    let elapsed = start.elapsed();
    let mut pass = elapsed <= Duration::from_secs(600) && errors(&report) == 0;
    let mut parts = Vec::new();
    for &(l, h) in &cfg.pairs {
        let g = format!("l{l}-h{h}");
        let c = report
            .stat(&g, "constructive")
            .expect("constructiveness recorded");
        let (f1, kl, frob) = (
            median(&report, &g, "f1"),
            median(&report, &g, "kl"),
            median(&report, &g, "frobenius"),
        );
        pass &= c.count == cfg.instances && c.mean == 1.0 && f1 == 1.0 && kl <= 1e-3;
        parts.push(format!(
            "({l},{h}) constructive {:.3} F1 {f1} KL {kl:.2e} frob {frob:.2e}",
            c.mean
        ));
    }
    outcome(
        pass,
        format!(
            "{}; {:.1} s (limit 600 s)",
            parts.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn can_suite() -> Outcome {
    let cfg = CanConfig::desk(SEED);
    let start = Instant::now();
    let report = run_can_benchmark(&cfg).expect("CAN benchmark runs");
    let elapsed = start.elapsed();
    let mut pass = elapsed <= Duration::from_secs(300) && errors(&report) == 0;
    let mut parts = Vec::new();
    for t in &cfg.topologies {
        let (f10, f100) = (
            median(&report, &format!("{t}-nt10"), "fpr"),
            median(&report, &format!("{t}-nt100"), "fpr"),
        );
        let (t10, t100) = (
            median(&report, &format!("{t}-nt10"), "tpr"),
            median(&report, &format!("{t}-nt100"), "tpr"),
        );
        pass &= f10 == 0.0 && f100 == 0.0 && t100 >= 0.95 && t10 <= t100;
        parts.push(format!("{t} FPR {f10}/{f100} TPR {t10:.3}/{t100:.3}"));
    }
    outcome(
        pass,
        format!(
            "N=6 S=10 (nt 10/100): {}; {:.1} s (limit 300 s)",
            parts.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn laplacian_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    let mut edges = 0;
    for k in 0..200 {
        let n = rng.random_range(2..=6);
        let dims = common::dims(n, 1, 8, &mut rng);
        let can = common::random_dag(&dims, 0.5, k % 2 == 0, &mut rng);
        edges += can.edges().len();
        let b = incidence(&can).dense;
        let lhs = degree(&can).dense - adjacency(&can).dense;
        worst = worst.max((lhs - &b * b.transpose()).norm());
    }
    outcome(
        worst <= 1e-10,
        format!("200 CANs ({edges} edges), max residual {worst:.2e} (limit 1e-10)"),
    )
}

fn consistency_iff_stiefel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let (mut agree, mut violated, mut total) = (0, 0, 0);
    for k in 0..200 {
        let n = rng.random_range(2..=6);
        let dims = common::dims(n, 1, 8, &mut rng);
        let can = common::random_dag(&dims, 0.6, true, &mut rng);
        if can.edges().is_empty() {
            continue;
        }
        let mut edges = can.edges().to_vec();
        if k % 2 == 1 {
            let e = rng.random_range(0..edges.len());
            let delta = 10f64.powf(rng.random_range(-12.0..-3.0));
            edges[e].clca.weights *= 1.0 + delta;
        }
        let can = can_core::can_graph::CanSpec::new(can.nodes().to_vec(), edges).unwrap();
        let expected = can.edges().iter().all(|e| {
            let v = &e.clca.weights;
            (v.transpose() * v - DMatrix::identity(v.ncols(), v.ncols())).norm() <= 1e-8
        });
        violated += usize::from(!expected);
        total += 1;
        agree += usize::from(check_consistency(&can, 1e-8).consistent == expected);
    }
    outcome(
        agree == total,
        format!("{agree}/{total} agree ({violated} with a violating edge)"),
    )
}

fn kernel_iff_reachable() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let (mut agree, mut reachable, mut numeric_ok) = (0, 0, 0);
    for _ in 0..50 {
        let n = rng.random_range(3..=7);
        let dims = common::distinct_dims(n, 2, 14, &mut rng);
        let can = common::random_tree(&dims, &mut rng);
        let mult = kernel_multiplicity(&can, 1e-8).unwrap();
        let l = degree(&can).dense - adjacency(&can).dense;
        let ev = l.symmetric_eigenvalues();
        let top = ev.amax();
        numeric_ok += usize::from(ev.iter().filter(|&&v| v < 1e-8 * top).count() == mult);
        let all = reachability_from_coarsest(&can).all_reachable;
        reachable += usize::from(all);
        agree += usize::from((mult == dims[n - 1]) == all);
    }
    let example = common::four_node_example(&mut rng);
    let example_mult = kernel_multiplicity(&example, 1e-8).unwrap();
    outcome(
        agree == 50 && numeric_ok == 50 && reachable > 0 && reachable < 50 && example_mult < 2,
        format!(
            "{agree}/50 agree ({reachable} fully reachable), eigen count matches {numeric_ok}/50; \
             four-node example multiplicity {example_mult} < 2"
        ),
    )
}

fn sections() -> Vec<can_core::harness::CanInstance> {
    let topologies = [
        Topology::Chain,
        Topology::Star,
        Topology::Tree,
        Topology::RandomTree,
    ];
    topologies
        .iter()
        .flat_map(|&t| (0..8).map(move |s| gen_can_instance(t, 6, 2, 12, SEED * 100 + s).unwrap()))
        .collect()
}

fn fixed_points() -> Outcome {
    let (mut fixed, mut caught, mut perturbations) = (0, 0, 0);
    let insts = sections();
    for inst in &insts {
        let chi = gaussian_cochain(&inst.section());
        let profiles: Vec<WeightProfile> = [0.0, 0.3, 1.0]
            .iter()
            .map(|&l| WeightProfile::uniform(&inst.can).with_lambda_dyn(l))
            .collect();
        if profiles
            .iter()
            .all(|w| is_fixed_point(&inst.can, &chi, w, 1e-9).unwrap().is_fixed)
        {
            fixed += 1;
        }
        for k in 0..chi.len() {
            let mut bumped = chi.clone();
            let g = chi[k]
                .as_gaussian()
                .expect("section is Gaussian")
                .scaled(1.1);
            bumped[k] = MixtureMeasure::single(g);
            perturbations += 1;
            if profiles.iter().all(|w| {
                !is_fixed_point(&inst.can, &bumped, w, 1e-9)
                    .unwrap()
                    .is_fixed
            }) {
                caught += 1;
            }
        }
    }
    outcome(
        fixed == insts.len() && caught == perturbations,
        format!(
            "{fixed}/{} sections fixed at lambda_dyn 0, 0.3, 1; {caught}/{perturbations} 1.1-scaled nodes rejected",
            insts.len()
        ),
    )
}

fn shared_spectrum() -> Outcome {
    let mut worst = 0.0f64;
    let insts = sections();
    for inst in &insts {
        let spectra: Vec<Vec<f64>> = inst
            .section()
            .iter()
            .map(|m| {
                let mut ev: Vec<f64> = m.cov().symmetric_eigenvalues().iter().copied().collect();
                ev.sort_by(|a, b| b.total_cmp(a));
                ev
            })
            .collect();
        let h = spectra.iter().map(Vec::len).min().unwrap();
        let reference = spectra.last().unwrap();
        for s in &spectra {
            for k in 0..h {
                worst = worst.max((s[k] - reference[k]).abs() / reference[0]);
            }
        }
    }
    outcome(
        worst <= 1e-9,
        format!(
            "{} sections, max relative gap {worst:.2e} (limit 1e-9)",
            insts.len()
        ),
    )
}

fn interlacing_necessity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let (mut planted_pass, mut rejected, mut never_converged) = (0, 0, 0);
    for k in 0..100 {
        let ell = rng.random_range(3..=12);
        let h = rng.random_range(1..ell);
        let inst = gen_local_instance(ell, h, SEED * 1000 + k).unwrap();
        planted_pass += usize::from(interlacing_check(&inst.sigma_l, &inst.sigma_h, None).unwrap());

        let lift = 1.5 * inst.sigma_l.eig().lambda_max() / inst.sigma_h.eig().lambda_max();
        let violator = GaussianMeasure::new(inst.sigma_h.cov() * lift).unwrap();
        rejected += usize::from(!interlacing_check(&inst.sigma_l, &violator, None).unwrap());
        let problem = build_local_problem(
            &inst.sigma_l,
            &violator,
            &inst.truth.structure,
            DEFAULT_RANK_TOL,
        )
        .unwrap();
        let cfg = SolverConfig {
            ntrials: 20,
            rng_seed: k,
            ..SolverConfig::default()
        };
        never_converged += usize::from(!solve(&problem, &cfg).unwrap().converged);
    }
    outcome(
        planted_pass == 100 && rejected == 100 && never_converged == 100,
        format!(
            "planted pass {planted_pass}/100; violators rejected {rejected}/100, \
             unsolved with 20 trials {never_converged}/100"
        ),
    )
}

fn v_update_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let (mut worst_grad, mut worst_ls) = (0.0f64, 0.0f64);
    for k in 0..50 {
        let ell = rng.random_range(2..=10);
        let h = rng.random_range(1..ell);
        let inst = gen_local_instance(ell, h, SEED * 2000 + k).unwrap();
        let p = build_local_problem(
            &inst.sigma_l,
            &inst.sigma_h,
            &inst.truth.structure,
            DEFAULT_RANK_TOL,
        )
        .unwrap();
        let mut state = SolverState {
            v: random_stiefel(ell, h, Some(&p.structure), &mut rng)
                .unwrap()
                .into_inner(),
            y: common::gaussian(ell, h, &mut rng),
            t: common::gaussian(p.r_i(), p.r_j(), &mut rng),
            psi: common::gaussian(ell, h, &mut rng),
            upsilon: common::gaussian(p.r_i(), p.r_j(), &mut rng),
            iteration: 0,
        };
        state.v = update_v(&state, &p);

        let step = 1e-5;
        let grad: f64 = p
            .support()
            .iter()
            .map(|&(r, c)| {
                let mut plus = state.clone();
                plus.v[(r, c)] += step;
                let mut minus = state.clone();
                minus.v[(r, c)] -= step;
                ((augmented_lagrangian(&plus, &p) - augmented_lagrangian(&minus, &p))
                    / (2.0 * step))
                    .powi(2)
            })
            .sum::<f64>()
            .sqrt();
        worst_grad = worst_grad.max(grad);

        // Stacked least squares: [I; M] v = [vec(Y − Ψ); vec(T − Υ)], with M
        // the map from support entries to vec(Aᵀ V C).
        let sup = p.support();
        let (n, m) = (sup.len(), p.r_i() * p.r_j());
        let mut system = DMatrix::zeros(n + m, n);
        for (q, &(r, c)) in sup.iter().enumerate() {
            system[(q, q)] = 1.0;
            let mut unit = DMatrix::zeros(ell, h);
            unit[(r, c)] = 1.0;
            let w = p.whiten(&unit);
            for (z, &x) in w.iter().enumerate() {
                system[(n + z, q)] = x;
            }
        }
        let yp = &state.y - &state.psi;
        let tu = &state.t - &state.upsilon;
        let rhs = DVector::from_iterator(
            n + m,
            sup.iter()
                .map(|&(r, c)| yp[(r, c)])
                .chain(tu.iter().copied()),
        );
        let ls = system.svd(true, true).solve(&rhs, 1e-14).unwrap();
        for (q, &(r, c)) in sup.iter().enumerate() {
            worst_ls = worst_ls.max((ls[q] - state.v[(r, c)]).abs());
        }
    }
    outcome(
        worst_grad <= 1e-6 && worst_ls <= 1e-8,
        format!("50 states: max gradient norm {worst_grad:.2e} (limit 1e-6), max LS deviation {worst_ls:.2e} (limit 1e-8)"),
    )
}

fn determinism() -> Outcome {
    let local = LocalConfig {
        pairs: vec![(8, 3), (6, 2)],
        instances: 4,
        solver: SolverConfig {
            ntrials: 5,
            ..SolverConfig::default()
        },
        rng_seed: SEED,
    };
    let can = CanConfig {
        topologies: vec![Topology::Chain, Topology::Tree],
        nodes: 5,
        dim_hi: 8,
        instances: 3,
        ntrials: vec![3, 6],
        ..CanConfig::desk(SEED)
    };
    let dir = std::env::temp_dir().join(format!("can-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut same = true;
    for (name, run) in [
        (
            "local",
            Box::new(|| run_local_benchmark(&local).unwrap()) as Box<dyn Fn() -> RunReport>,
        ),
        ("can", Box::new(|| run_can_benchmark(&can).unwrap())),
    ] {
        let (a, b) = (
            dir.join(format!("{name}-a.csv")),
            dir.join(format!("{name}-b.csv")),
        );
        run().write(&a, None).unwrap();
        run().write(&b, None).unwrap();
        same &= std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    }
    let _ = std::fs::remove_dir_all(&dir);
    outcome(
        same,
        format!(
            "local and CAN reruns {}",
            if same { "byte-identical" } else { "differ" }
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("local CLCA suite", local_suite),
        ("CAN recovery suite (desk scale)", can_suite),
        ("Laplacian identity", laplacian_identity),
        ("consistency iff Stiefel edges", consistency_iff_stiefel),
        ("kernel multiplicity iff reachability", kernel_iff_reachable),
        ("global sections are fixed points", fixed_points),
        ("shared nonzero spectrum", shared_spectrum),
        ("interlacing necessity", interlacing_necessity),
        ("V-update correctness", v_update_correctness),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "criterion {:>2} {} {name}: {} [{:.1} s]",
            k + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
