use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generate::{gen_can_instance, gen_local_instance, instance_seed, Topology};
use crate::abstraction::{constructiveness, frobenius_distance, structural_f1};
use crate::error::{CanError, Result};
use crate::numerics::DEFAULT_RANK_TOL;
use crate::search::{fpr_tpr, learn_can, SearchOptions};
use crate::spectral::{build_local_problem, solve_best, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    /// `(ℓ, h)` configurations.
    pub pairs: Vec<(usize, usize)>,
    pub instances: usize,
    pub solver: SolverConfig,
    pub rng_seed: u64,
}

impl LocalConfig {
    /// Three configurations, 30 instances, 50 restarts, `τ = 1e-4`.
    pub fn standard(rng_seed: u64) -> Self {
        Self {
            pairs: vec![(12, 2), (12, 4), (12, 6)],
            instances: 30,
            solver: SolverConfig {
                ntrials: 50,
                ..SolverConfig::default()
            },
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(CanError::Validation(
                "instance count must be at least 1".into(),
            ));
        }
        if let Some(&(l, h)) = self.pairs.iter().find(|&&(l, h)| h == 0 || l <= h) {
            return Err(CanError::Validation(format!(
                "need ell > h >= 1, got ({l}, {h})"
            )));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanConfig {
    pub topologies: Vec<Topology>,
    pub nodes: usize,
    pub dim_lo: usize,
    pub dim_hi: usize,
    pub instances: usize,
    /// Restart budgets to compare; `solver.ntrials` is overridden by each.
    pub ntrials: Vec<usize>,
    pub solver: SolverConfig,
    pub rng_seed: u64,
}

impl CanConfig {
    /// Chain, star and tree over `N = 10` nodes with `d ∈ [2, 20]`, 30
    /// instances, `ntrials ∈ {10, 100}`, `τ = 1e-3`.
    pub fn standard(rng_seed: u64) -> Self {
        Self {
            topologies: Topology::BENCHMARK.to_vec(),
            nodes: 10,
            dim_lo: 2,
            dim_hi: 20,
            instances: 30,
            ntrials: vec![10, 100],
            solver: SolverConfig {
                tau_a: 1e-3,
                tau_r: 1e-3,
                ..SolverConfig::default()
            },
            rng_seed,
        }
    }

    /// `N = 6`, `d ∈ [2, 12]`, 10 instances; otherwise as [`CanConfig::standard`].
    pub fn desk(rng_seed: u64) -> Self {
        Self {
            nodes: 6,
            dim_hi: 12,
            instances: 10,
            ..Self::standard(rng_seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(CanError::Validation(
                "instance count must be at least 1".into(),
            ));
        }
        if self.nodes < 2 || self.dim_lo < 2 || self.dim_lo > self.dim_hi {
            return Err(CanError::Validation(format!(
                "need N >= 2 and 2 <= dim_lo <= dim_hi, got N = {}, dims [{}, {}]",
                self.nodes, self.dim_lo, self.dim_hi
            )));
        }
        if self.topologies.is_empty() || self.ntrials.is_empty() || self.ntrials.contains(&0) {
            return Err(CanError::Validation(
                "need at least one topology and positive ntrials".into(),
            ));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    Local(LocalConfig),
    Can(CanConfig),
}

/// One `(instance, metric, value)` row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    /// Group label (configuration), e.g. `l12-h2` or `chain-nt10`.
    pub group: String,
    pub instance_id: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub mean: f64,
}

impl Summary {
    /// Quartiles by linear interpolation between order statistics. Non-finite
    /// values are dropped; an empty sample gives NaN statistics.
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            if v.is_empty() {
                return f64::NAN;
            }
            let x = p * (v.len() - 1) as f64;
            let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
        };
        let (q1, median, q3) = (q(0.25), q(0.5), q(0.75));
        let mean = if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        };
        Self {
            count: v.len(),
            median,
            q1,
            q3,
            iqr: q3 - q1,
            mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub records: Vec<MetricRecord>,
    /// Keyed by group, then metric.
    pub summary: BTreeMap<String, BTreeMap<String, Summary>>,
    /// Instances per group.
    pub instances: BTreeMap<String, usize>,
}

impl RunReport {
    fn new(config: ExperimentConfig, records: Vec<MetricRecord>) -> Self {
        let mut values: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        let mut ids: BTreeMap<String, std::collections::BTreeSet<String>> = BTreeMap::new();
        for r in &records {
            values
                .entry(r.group.clone())
                .or_default()
                .entry(r.metric.clone())
                .or_default()
                .push(r.value);
            ids.entry(r.group.clone())
                .or_default()
                .insert(r.instance_id.clone());
        }
        let summary = values
            .into_iter()
            .map(|(g, m)| {
                (
                    g,
                    m.into_iter().map(|(k, v)| (k, Summary::of(&v))).collect(),
                )
            })
            .collect();
        let instances = ids.into_iter().map(|(g, s)| (g, s.len())).collect();
        Self {
            config,
            records,
            summary,
            instances,
        }
    }

    pub fn stat(&self, group: &str, metric: &str) -> Option<&Summary> {
        self.summary.get(group)?.get(metric)
    }

    /// `instance_id,metric,value` with `instance_id = group/instance`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance_id,metric,value\n");
        for r in &self.records {
            let _ = writeln!(s, "{}/{},{},{}", r.group, r.instance_id, r.metric, r.value);
        }
        s
    }

    /// Per-group medians and interquartile ranges as pretty JSON.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            config: &'a ExperimentConfig,
            instances: &'a BTreeMap<String, usize>,
            summary: &'a BTreeMap<String, BTreeMap<String, Summary>>,
        }
        let doc = Doc {
            config: &self.config,
            instances: &self.instances,
            summary: &self.summary,
        };
        serde_json::to_string_pretty(&doc).map_err(|e| CanError::Internal(e.to_string()))
    }

    pub fn write(&self, csv: &Path, summary: Option<&Path>) -> Result<()> {
        std::fs::File::create(csv)?.write_all(self.to_csv().as_bytes())?;
        if let Some(p) = summary {
            std::fs::File::create(p)?.write_all(self.summary_json()?.as_bytes())?;
        }
        Ok(())
    }
}

fn record(group: &str, id: &str, metric: &str, value: f64) -> MetricRecord {
    MetricRecord {
        group: group.into(),
        instance_id: id.into(),
        metric: metric.into(),
        value,
    }
}

fn bool_value(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Generation seed of local instance `index` in configuration `(ell, h)`.
pub fn local_seed(cfg: &LocalConfig, ell: usize, h: usize, index: usize) -> u64 {
    instance_seed(cfg.rng_seed ^ ((ell as u64) << 32 | h as u64), index as u64)
}

/// Generation seed of CAN instance `index` of a topology.
pub fn can_seed(cfg: &CanConfig, topology: Topology, index: usize) -> u64 {
    instance_seed(cfg.rng_seed ^ topology as u64, index as u64)
}

fn local_instance_records(
    ell: usize,
    h: usize,
    index: usize,
    cfg: &LocalConfig,
) -> Vec<MetricRecord> {
    let group = format!("l{ell}-h{h}");
    let id = format!("{index:03}");
    let seed = local_seed(cfg, ell, h, index);
    let run = || -> Result<Vec<(&'static str, f64)>> {
        let inst = gen_local_instance(ell, h, seed)?;
        let problem = build_local_problem(
            &inst.sigma_l,
            &inst.sigma_h,
            &inst.truth.structure,
            DEFAULT_RANK_TOL,
        )?;
        let solver = SolverConfig {
            rng_seed: seed,
            ..cfg.solver
        };
        let out = solve_best(&problem, &solver)?;
        let mut m = vec![
            ("converged", bool_value(out.converged)),
            ("trials_used", out.trials_used as f64),
            ("iterations", out.iterations as f64),
        ];
        match &out.clca {
            Some(c) => {
                m.push(("constructive", bool_value(constructiveness(c))));
                m.push(("kl", out.final_kl.unwrap_or(f64::NAN)));
                m.push((
                    "frobenius",
                    frobenius_distance(&c.masked_weights(), &inst.truth.weights)?,
                ));
                m.push((
                    "f1",
                    structural_f1(&c.masked_weights(), &inst.truth.structure)?,
                ));
            }
            None => {
                m.push(("constructive", 0.0));
                m.push(("kl", f64::INFINITY));
                m.push(("f1", 0.0));
            }
        }
        Ok(m)
    };
    match run() {
        Ok(m) => m
            .into_iter()
            .map(|(k, v)| record(&group, &id, k, v))
            .collect(),
        Err(e) => {
            log::warn!("local instance {group}/{id} failed: {e}");
            vec![
                record(&group, &id, "error", 1.0),
                record(&group, &id, "constructive", 0.0),
            ]
        }
    }
}

/// Runs SPECTRAL with restarts on planted single-edge problems and keeps the
/// lowest-divergence accepted trial of each instance.
pub fn run_local_benchmark(cfg: &LocalConfig) -> Result<RunReport> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize, usize)> = cfg
        .pairs
        .iter()
        .flat_map(|&(l, h)| (0..cfg.instances).map(move |s| (l, h, s)))
        .collect();
    let records: Vec<MetricRecord> = jobs
        .par_iter()
        .map(|&(l, h, s)| local_instance_records(l, h, s, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(RunReport::new(
        ExperimentConfig::Local(cfg.clone()),
        records,
    ))
}

fn can_instance_records(topology: Topology, index: usize, cfg: &CanConfig) -> Vec<MetricRecord> {
    let id = format!("{index:03}");
    let seed = can_seed(cfg, topology, index);
    let inst = match gen_can_instance(topology, cfg.nodes, cfg.dim_lo, cfg.dim_hi, seed) {
        Ok(i) => i,
        Err(e) => {
            log::warn!("generation of {topology}/{id} failed: {e}");
            return cfg
                .ntrials
                .iter()
                .map(|nt| record(&format!("{topology}-nt{nt}"), &id, "error", 1.0))
                .collect();
        }
    };
    let section = inst.section();
    let mut out = Vec::new();
    for &nt in &cfg.ntrials {
        let group = format!("{topology}-nt{nt}");
        let solver = SolverConfig {
            ntrials: nt,
            rng_seed: seed,
            ..cfg.solver
        };
        match learn_can(
            &section,
            &inst.structures,
            &solver,
            &SearchOptions::default(),
        )
        .and_then(|l| Ok((fpr_tpr(&l.a, &inst.truth_closure)?, l.solver_calls)))
        {
            Ok(((fpr, tpr), calls)) => {
                out.push(record(&group, &id, "fpr", fpr));
                out.push(record(&group, &id, "tpr", tpr));
                out.push(record(&group, &id, "solver_calls", calls as f64));
            }
            Err(e) => {
                log::warn!("search on {group}/{id} failed: {e}");
                out.push(record(&group, &id, "error", 1.0));
            }
        }
    }
    out
}

/// Learns each generated CAN from its section for every restart budget and
/// scores the learned closure against the truth.
pub fn run_can_benchmark(cfg: &CanConfig) -> Result<RunReport> {
    cfg.validate()?;
    let jobs: Vec<(Topology, usize)> = cfg
        .topologies
        .iter()
        .flat_map(|&t| (0..cfg.instances).map(move |s| (t, s)))
        .collect();
    let mut records: Vec<MetricRecord> = jobs
        .par_iter()
        .map(|&(t, s)| can_instance_records(t, s, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    records.sort_by(|a, b| (&a.group, &a.instance_id).cmp(&(&b.group, &b.instance_id)));
    Ok(RunReport::new(ExperimentConfig::Can(cfg.clone()), records))
}
