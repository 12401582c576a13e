use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use can_core::abstraction::{interlacing_check, structural_f1, StructureMatrix};
use can_core::can_graph::{
    adjacency, check_consistency, degree, incidence, kernel_multiplicity, laplacian,
    reachability_from_coarsest, smoothness, CanSpec, KERNEL_EIG_TOL,
};
use can_core::diffusion::{diffuse, gaussian_cochain, WeightProfile};
use can_core::harness::io::{
    can_instance_from_doc, can_instance_to_doc, from_rows, local_instance_to_doc, parse_json,
    read_json, to_rows, write_json, CanDoc, CanInstanceDoc, LocalInstanceDoc, Rows,
};
use can_core::harness::{
    gen_can_instance, gen_local_instance, instance_seed, run_can_benchmark, run_local_benchmark,
    CanConfig, LocalConfig, RunReport, Topology,
};
use can_core::numerics::{GaussianMeasure, DEFAULT_RANK_TOL, STIEFEL_TOL};
use can_core::search::{fpr_tpr, learn_can, lower_pairs, SearchOptions};
use can_core::spectral::{build_local_problem, solve, solve_best, SolverConfig};
use can_core::CanError;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

/// Build, analyze and learn causal abstraction networks.
#[derive(Parser)]
#[command(name = "can", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Solver restarts (per budget for bench-can).
    #[arg(long, global = true)]
    ntrials: Option<usize>,
    #[arg(long, global = true)]
    tau_a: Option<f64>,
    #[arg(long, global = true)]
    tau_r: Option<f64>,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    /// Output file (or directory for multi-file outputs); stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

impl Common {
    fn solver(&self, base: SolverConfig) -> SolverConfig {
        SolverConfig {
            tau_a: self.tau_a.unwrap_or(base.tau_a),
            tau_r: self.tau_r.unwrap_or(base.tau_r),
            max_iters: self.max_iters.unwrap_or(base.max_iters),
            ntrials: self.ntrials.unwrap_or(base.ntrials),
            rng_seed: self.seed,
            ..base
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate planted single-edge instances.
    GenLocal {
        #[arg(long, default_value_t = 12)]
        ell: usize,
        #[arg(long, default_value_t = 2)]
        h: usize,
        /// Instances to write; more than one requires --out to be a directory.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Generate CANs with a global section.
    GenCan {
        #[arg(long, default_value = "chain")]
        topology: Topology,
        #[arg(long, default_value_t = 10)]
        nodes: usize,
        #[arg(long, default_value_t = 2)]
        dim_lo: usize,
        #[arg(long, default_value_t = 20)]
        dim_hi: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Local CLCA suite; writes the metrics CSV to --out.
    BenchLocal {
        /// Comma-separated `ell:h` pairs.
        #[arg(long, default_value = "12:2,12:4,12:6", value_delimiter = ',')]
        pairs: Vec<String>,
        #[arg(long, default_value_t = 30)]
        instances: usize,
        /// Summary JSON path.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Also write every instance as JSON into this directory.
        #[arg(long)]
        instances_dir: Option<PathBuf>,
    },
    /// CAN recovery suite; writes the metrics CSV to --out.
    BenchCan {
        #[arg(long, default_value = "chain,star,tree", value_delimiter = ',')]
        topologies: Vec<Topology>,
        #[arg(long, default_value_t = 10)]
        nodes: usize,
        #[arg(long, default_value_t = 2)]
        dim_lo: usize,
        #[arg(long, default_value_t = 20)]
        dim_hi: usize,
        #[arg(long, default_value_t = 30)]
        instances: usize,
        /// Restart budgets; overridden by --ntrials.
        #[arg(long, default_value = "10,100", value_delimiter = ',')]
        ntrials_list: Vec<usize>,
        /// N = 6, d in [2, 12], 10 instances.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        instances_dir: Option<PathBuf>,
    },
    /// Interlacing test between two covariance files.
    Check {
        #[arg(long)]
        sigma_l: PathBuf,
        #[arg(long)]
        sigma_h: PathBuf,
        /// Additive slack; default is relative to the largest eigenvalue.
        #[arg(long)]
        slack: Option<f64>,
    },
    /// Learn one CLCA from a pair of covariances and a structure.
    LearnEdge {
        /// Local instance JSON (alternative to the three matrix files).
        #[arg(long, conflicts_with_all = ["sigma_l", "sigma_h", "structure"])]
        instance: Option<PathBuf>,
        #[arg(long, requires_all = ["sigma_h", "structure"])]
        sigma_l: Option<PathBuf>,
        #[arg(long)]
        sigma_h: Option<PathBuf>,
        #[arg(long)]
        structure: Option<PathBuf>,
        /// Run every trial and keep the lowest divergence.
        #[arg(long)]
        best: bool,
    },
    /// Learn a CAN from a generated instance file.
    LearnCan {
        #[arg(long)]
        instance: PathBuf,
        /// Solve closure pairs directly instead of composing maps.
        #[arg(long)]
        resolve_closure: bool,
    },
    /// Block matrices, kernel multiplicity and reachability of a CAN file.
    Invariants {
        #[arg(long)]
        can: PathBuf,
        #[arg(long, default_value_t = KERNEL_EIG_TOL)]
        eig_tol: f64,
    },
    /// Run the mixture dynamics from the node measures of a CAN file.
    Diffuse {
        #[arg(long)]
        can: PathBuf,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 0.5)]
        lambda_dyn: f64,
    },
    /// Per-edge divergences of the node measures of a CAN file.
    Smoothness {
        #[arg(long)]
        can: PathBuf,
    },
}

/// Non-convergence where convergence was required.
#[derive(Debug)]
struct NotConverged;

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("solver did not converge within the restart budget")
    }
}

impl std::error::Error for NotConverged {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<NotConverged>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn emit_json(out: Option<&Path>, value: &serde_json::Value) -> anyhow::Result<()> {
    emit(out, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_matrix(path: &Path) -> anyhow::Result<nalgebra::DMatrix<f64>> {
    let rows: Rows = read_json(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(from_rows(&rows, &path.display().to_string())?)
}

fn read_covariance(path: &Path) -> anyhow::Result<GaussianMeasure> {
    GaussianMeasure::new(read_matrix(path)?)
        .with_context(|| format!("covariance {}", path.display()))
}

/// Reads a CAN document, or the `can` member of a generated instance.
fn read_can(path: &Path) -> anyhow::Result<CanSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let inner = value.get("can").map(|c| c.to_string());
    let doc: CanDoc = parse_json(inner.as_deref().unwrap_or(&text))
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(can_core::harness::io::can_from_doc(&doc)?)
}

fn node_measures(can: &CanSpec) -> anyhow::Result<Vec<GaussianMeasure>> {
    can.measures()
        .ok_or_else(|| CanError::Validation("every node needs a `cov` entry".into()).into())
}

/// Writes `count` documents: to --out (or stdout) when there is one, else
/// into the --out directory as `{stem}-{index}.json`.
fn write_many<T: serde::Serialize>(
    out: Option<&Path>,
    stem: &str,
    docs: impl Iterator<Item = anyhow::Result<T>>,
    count: usize,
) -> anyhow::Result<()> {
    if count == 1 {
        let doc = docs.into_iter().next().expect("one document")?;
        return emit(out, &(serde_json::to_string_pretty(&doc)? + "\n"));
    }
    let Some(dir) = out else {
        bail!("--out must name a directory when --count > 1")
    };
    fs::create_dir_all(dir)?;
    for (k, doc) in docs.enumerate() {
        write_json(&dir.join(format!("{stem}-{k:03}.json")), &doc?)?;
    }
    Ok(())
}

fn parse_pair(s: &str) -> anyhow::Result<(usize, usize)> {
    let (l, h) = s
        .split_once(':')
        .with_context(|| format!("pair `{s}` is not `ell:h`"))?;
    Ok((l.trim().parse()?, h.trim().parse()?))
}

fn write_report(
    report: &RunReport,
    out: Option<&Path>,
    summary: Option<&Path>,
) -> anyhow::Result<()> {
    emit(out, &report.to_csv())?;
    if let Some(p) = summary {
        fs::write(p, report.summary_json()? + "\n")?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    let out = c.out.as_deref();
    match &cli.command {
        Command::GenLocal { ell, h, count } => {
            let docs = (0..*count).map(|k| {
                let seed = if *count == 1 {
                    c.seed
                } else {
                    instance_seed(c.seed, k as u64)
                };
                Ok(local_instance_to_doc(&gen_local_instance(*ell, *h, seed)?))
            });
            write_many(out, &format!("local-l{ell}-h{h}"), docs, *count)
        }
        Command::GenCan {
            topology,
            nodes,
            dim_lo,
            dim_hi,
            count,
        } => {
            let docs = (0..*count).map(|k| {
                let seed = if *count == 1 {
                    c.seed
                } else {
                    instance_seed(c.seed, k as u64)
                };
                Ok(can_instance_to_doc(&gen_can_instance(
                    *topology, *nodes, *dim_lo, *dim_hi, seed,
                )?))
            });
            write_many(out, &format!("can-{topology}"), docs, *count)
        }
        Command::BenchLocal {
            pairs,
            instances,
            summary,
            instances_dir,
        } => {
            let base = LocalConfig::standard(c.seed);
            let cfg = LocalConfig {
                pairs: pairs
                    .iter()
                    .map(|p| parse_pair(p))
                    .collect::<anyhow::Result<_>>()?,
                instances: *instances,
                solver: c.solver(base.solver),
                rng_seed: c.seed,
            };
            cfg.validate()?;
            if let Some(dir) = instances_dir {
                fs::create_dir_all(dir)?;
                for &(l, h) in &cfg.pairs {
                    for k in 0..cfg.instances {
                        let seed = can_core::harness::bench::local_seed(&cfg, l, h, k);
                        let doc = local_instance_to_doc(&gen_local_instance(l, h, seed)?);
                        write_json(&dir.join(format!("local-l{l}-h{h}-{k:03}.json")), &doc)?;
                    }
                }
            }
            write_report(&run_local_benchmark(&cfg)?, out, summary.as_deref())
        }
        Command::BenchCan {
            topologies,
            nodes,
            dim_lo,
            dim_hi,
            instances,
            ntrials_list,
            desk,
            summary,
            instances_dir,
        } => {
            let mut cfg = if *desk {
                CanConfig::desk(c.seed)
            } else {
                CanConfig {
                    topologies: topologies.clone(),
                    nodes: *nodes,
                    dim_lo: *dim_lo,
                    dim_hi: *dim_hi,
                    instances: *instances,
                    ntrials: ntrials_list.clone(),
                    ..CanConfig::standard(c.seed)
                }
            };
            cfg.solver = c.solver(cfg.solver);
            if let Some(nt) = c.ntrials {
                cfg.ntrials = vec![nt];
            }
            cfg.validate()?;
            if let Some(dir) = instances_dir {
                fs::create_dir_all(dir)?;
                for &t in &cfg.topologies {
                    for k in 0..cfg.instances {
                        let seed = can_core::harness::bench::can_seed(&cfg, t, k);
                        let inst = gen_can_instance(t, cfg.nodes, cfg.dim_lo, cfg.dim_hi, seed)?;
                        write_json(
                            &dir.join(format!("can-{t}-{k:03}.json")),
                            &can_instance_to_doc(&inst),
                        )?;
                    }
                }
            }
            write_report(&run_can_benchmark(&cfg)?, out, summary.as_deref())
        }
        Command::Check {
            sigma_l,
            sigma_h,
            slack,
        } => {
            let (l, h) = (read_covariance(sigma_l)?, read_covariance(sigma_h)?);
            let pass = interlacing_check(&l, &h, *slack)?;
            emit_json(
                out,
                &json!({
                    "interlacing": pass,
                    "spectrum_l": l.ascending_spectrum(),
                    "spectrum_h": h.ascending_spectrum(),
                }),
            )
        }
        Command::LearnEdge {
            instance,
            sigma_l,
            sigma_h,
            structure,
            best,
        } => {
            let (l, h, b, truth) = match (instance, sigma_l, sigma_h, structure) {
                (Some(p), ..) => {
                    let doc: LocalInstanceDoc =
                        read_json(p).with_context(|| format!("reading {}", p.display()))?;
                    let b = StructureMatrix::try_new(from_rows(&doc.structure, "structure")?)?;
                    (
                        GaussianMeasure::new(from_rows(&doc.sigma_l, "sigma_l")?)?,
                        GaussianMeasure::new(from_rows(&doc.sigma_h, "sigma_h")?)?,
                        b,
                        Some(from_rows(&doc.weights, "weights")?),
                    )
                }
                (None, Some(l), Some(h), Some(b)) => (
                    read_covariance(l)?,
                    read_covariance(h)?,
                    StructureMatrix::try_new(read_matrix(b)?)?,
                    None,
                ),
                _ => bail!(CanError::Validation(
                    "give --instance or all of --sigma-l, --sigma-h, --structure".into()
                )),
            };
            let solver = c.solver(SolverConfig::default());
            let problem = build_local_problem(&l, &h, &b, DEFAULT_RANK_TOL)?;
            let outcome = if *best {
                solve_best(&problem, &solver)?
            } else {
                solve(&problem, &solver)?
            };
            let mut doc = json!({
                "converged": outcome.converged,
                "trials_used": outcome.trials_used,
                "iterations": outcome.iterations,
                "kl": outcome.final_kl,
                "weights": outcome.clca.as_ref().map(|m| to_rows(&m.weights)),
            });
            if let (Some(t), Some(m)) = (truth, &outcome.clca) {
                doc["frobenius"] = json!(can_core::abstraction::frobenius_distance(
                    &m.masked_weights(),
                    &t
                )?);
                doc["f1"] = json!(structural_f1(&m.masked_weights(), &b)?);
            }
            emit_json(out, &doc)?;
            if !outcome.converged {
                return Err(NotConverged.into());
            }
            Ok(())
        }
        Command::LearnCan {
            instance,
            resolve_closure,
        } => {
            let doc: CanInstanceDoc =
                read_json(instance).with_context(|| format!("reading {}", instance.display()))?;
            let inst = can_instance_from_doc(&doc)?;
            let measures = node_measures(&inst.can)?;
            let base = SolverConfig {
                tau_a: 1e-3,
                tau_r: 1e-3,
                ntrials: 100,
                ..SolverConfig::default()
            };
            let opts = SearchOptions {
                resolve_closure: *resolve_closure,
                ..SearchOptions::default()
            };
            let learned = learn_can(&measures, &inst.structures, &c.solver(base), &opts)?;
            let id = |p: usize| inst.can.nodes()[p].id;
            let (fpr, tpr) = fpr_tpr(&learned.a, &inst.truth_closure)?;
            let edges: Vec<_> = lower_pairs(&learned.a)
                .into_iter()
                .map(|(i, j)| {
                    let m = &learned.maps[&(i, j)];
                    json!({ "fine": id(j), "coarse": id(i), "weights": to_rows(&m.weights) })
                })
                .collect();
            emit_json(
                out,
                &json!({
                    "edges": edges,
                    "closure": lower_pairs(&learned.closure).into_iter().map(|(i, j)| [id(i), id(j)]).collect::<Vec<_>>(),
                    "solver_calls": learned.solver_calls,
                    "records": learned.records,
                    "fpr": fpr,
                    "tpr": tpr,
                }),
            )
        }
        Command::Invariants { can, eig_tol } => {
            let can = read_can(can)?;
            let l = laplacian(&can)?;
            emit_json(
                out,
                &json!({
                    "ids": can.nodes().iter().map(|n| n.id).collect::<Vec<_>>(),
                    "dims": can.dims(),
                    "adjacency": to_rows(&adjacency(&can).dense),
                    "degree": to_rows(&degree(&can).dense),
                    "incidence": to_rows(&incidence(&can).dense),
                    "laplacian": to_rows(&l.dense),
                    "kernel_multiplicity": kernel_multiplicity(&can, *eig_tol)?,
                    "reachability": reachability_from_coarsest(&can),
                    "consistency": check_consistency(&can, STIEFEL_TOL),
                }),
            )
        }
        Command::Diffuse {
            can,
            steps,
            lambda,
            lambda_dyn,
        } => {
            let can = read_can(can)?;
            let chi0 = gaussian_cochain(&node_measures(&can)?);
            let w = WeightProfile::uniform(&can)
                .with_lambda(*lambda)
                .with_lambda_dyn(*lambda_dyn);
            let (_, records) = diffuse(&can, &chi0, &w, *steps)?;
            let mut text = String::new();
            for r in &records {
                text += &serde_json::to_string(r)?;
                text.push('\n');
            }
            emit(out, &text)
        }
        Command::Smoothness { can } => {
            let can = read_can(can)?;
            let report = smoothness(&can, &node_measures(&can)?)?;
            emit_json(out, &serde_json::to_value(report)?)
        }
    }
}
