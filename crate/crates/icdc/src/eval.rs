//! Best-of-n evaluation of the model and the baselines with optimality gaps.

use std::time::Instant;

use icdc_core::baselines::{
    construct_tour, genetic_algorithm, held_karp_costs, particle_swarm, pmsp_exact, sjf, Construction, GaConfig, PsoConfig,
};
use icdc_core::decoding::{full_reverse_generate, DecodeMode};
use icdc_core::model::IcdcModel;
use icdc_core::problems::{objective, Family};
use icdc_core::problems::PmspInstance;
use icdc_core::{rng_from_seed, Instance, Matrix, Rng, SolutionMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generator for sample `sample` of instance `index`: one ChaCha stream per
/// pair under a shared seed.
pub fn stream_rng(seed: u64, index: usize, sample: usize) -> Rng {
    let mut rng = rng_from_seed(seed);
    rng.set_stream(((index as u64) << 24) | sample as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Icdc,
    HeldKarp,
    NearestNeighbor,
    NearestInsertion,
    FurthestInsertion,
    Sjf,
    Ga,
    Pso,
    PmspExact,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Icdc,
        Method::HeldKarp,
        Method::NearestNeighbor,
        Method::NearestInsertion,
        Method::FurthestInsertion,
        Method::Sjf,
        Method::Ga,
        Method::Pso,
        Method::PmspExact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Icdc => "icdc",
            Method::HeldKarp => "held_karp",
            Method::NearestNeighbor => "nn",
            Method::NearestInsertion => "ni",
            Method::FurthestInsertion => "fi",
            Method::Sjf => "sjf",
            Method::Ga => "ga",
            Method::Pso => "pso",
            Method::PmspExact => "pmsp_exact",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn applies_to(self, family: Family) -> bool {
        match self {
            Method::Icdc => true,
            Method::HeldKarp | Method::NearestNeighbor | Method::NearestInsertion | Method::FurthestInsertion => family.is_routing(),
            Method::Sjf | Method::Ga | Method::Pso | Method::PmspExact => family == Family::Pmsp,
        }
    }

    /// Heuristics run by default for a family.
    pub fn baselines(family: Family) -> Vec<Method> {
        match family {
            Family::Pmsp => vec![Method::Sjf, Method::Ga, Method::Pso],
            _ => vec![Method::NearestNeighbor, Method::NearestInsertion, Method::FurthestInsertion],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Model samples per instance; the best feasible one is kept.
    pub samples: usize,
    pub stride: usize,
    pub seed: u64,
    pub workers: usize,
    pub ga: GaConfig,
    pub pso: PsoConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { samples: 32, stride: 1, seed: 0, workers: 1, ga: GaConfig::default(), pso: PsoConfig::default() }
    }
}

fn routing_costs(inst: &Instance) -> Result<&Matrix> {
    inst.route_costs().ok_or_else(|| Error::Schema("routing method applied to a PMSP instance".into()))
}

fn pmsp(inst: &Instance) -> Result<&PmspInstance> {
    match inst {
        Instance::Pmsp(p) => Ok(p),
        _ => Err(Error::Schema("PMSP method applied to a routing instance".into())),
    }
}

/// Runs `method` on instance `index`; returns the solution found.
pub fn solve(method: Method, inst: &Instance, index: usize, model: Option<&IcdcModel>, opts: &EvalOptions) -> Result<SolutionMatrix> {
    let mut rng = stream_rng(opts.seed, index, 0);
    let tour = |rule: Construction| -> Result<SolutionMatrix> { Ok(SolutionMatrix::from_tour(&construct_tour(routing_costs(inst)?, rule)?)) };
    Ok(match method {
        Method::Icdc => return best_of_n(model.ok_or_else(|| Error::Schema("icdc needs a checkpoint".into()))?, inst, index, opts),
        Method::HeldKarp => SolutionMatrix::from_tour(&held_karp_costs(routing_costs(inst)?)?.0),
        Method::NearestNeighbor => tour(Construction::NearestNeighbor)?,
        Method::NearestInsertion => tour(Construction::NearestInsertion)?,
        Method::FurthestInsertion => tour(Construction::FurthestInsertion)?,
        Method::Sjf => sjf(pmsp(inst)?),
        Method::Ga => genetic_algorithm(pmsp(inst)?, &opts.ga, &mut rng)?,
        Method::Pso => particle_swarm(pmsp(inst)?, &opts.pso, &mut rng)?,
        Method::PmspExact => pmsp_exact(pmsp(inst)?)?.0,
    })
}

/// Best of `opts.samples` reverse-process generations; sample `k` of
/// instance `index` always uses the same random stream.
pub fn best_of_n(model: &IcdcModel, inst: &Instance, index: usize, opts: &EvalOptions) -> Result<SolutionMatrix> {
    let sched = model.config().schedule_for_instance(inst)?;
    let mut best: Option<(f64, SolutionMatrix)> = None;
    for k in 0..opts.samples.max(1) {
        let mut rng = stream_rng(opts.seed, index, k + 1);
        let g = full_reverse_generate(model, inst, &sched, &mut rng, opts.stride, DecodeMode::Sample)?;
        let obj = objective(inst, &g.result.solution);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, g.result.solution));
        }
    }
    Ok(best.expect("at least one sample").1)
}

/// Exact optimum when the instance is within the oracles' reach.
pub fn exact_reference(inst: &Instance) -> Option<f64> {
    match inst {
        Instance::Pmsp(p) => pmsp_exact(p).ok().map(|(_, ms)| ms),
        _ => held_karp_costs(inst.route_costs()?).ok().map(|(_, len)| len),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub size: String,
    pub stride: usize,
    pub samples: usize,
    pub instances: usize,
    pub mean_objective: f64,
    /// Mean of per-instance `(obj − ref)/ref`, in percent.
    pub gap_pct: f64,
    /// `exact` or `best_of_report`.
    pub reference: String,
    /// Sum of per-instance solve times (single-worker equivalent).
    pub wallclock_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MethodRow>,
    /// Objective per row and instance.
    pub objectives: Vec<Vec<f64>>,
    pub references: Vec<f64>,
    pub reference_exact: bool,
}

/// Evaluates `methods` (model runs once per stride in `strides`) on
/// `instances`.
pub fn evaluate(
    instances: &[Instance],
    methods: &[Method],
    strides: &[usize],
    model: Option<&IcdcModel>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let family = instances.first().map(Instance::family).ok_or_else(|| Error::Schema("empty dataset".into()))?;
    if let Some(m) = methods.iter().find(|m| !m.applies_to(family)) {
        return Err(Error::Schema(format!("method {} does not apply to {}", m.name(), family.name())));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Schema(format!("worker pool: {e}")))?;
    let mut runs: Vec<(Method, usize)> = Vec::new();
    for &m in methods {
        if m == Method::Icdc {
            runs.extend(strides.iter().map(|&s| (m, s)));
        } else {
            runs.push((m, 1));
        }
    }
    let mut rows = Vec::new();
    let mut objectives = Vec::new();
    for &(method, stride) in &runs {
        let run_opts = EvalOptions { stride, ..opts.clone() };
        let results: Vec<Result<(f64, f64)>> = pool.install(|| {
            instances
                .par_iter()
                .enumerate()
                .map(|(i, inst)| {
                    let start = Instant::now();
                    let x = solve(method, inst, i, model, &run_opts)?;
                    let secs = start.elapsed().as_secs_f64();
                    Ok((objective(inst, &x), secs))
                })
                .collect()
        });
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let objs: Vec<f64> = results.iter().map(|r| r.0).collect();
        rows.push(MethodRow {
            method: method.name().into(),
            size: size_label(&instances[0]),
            stride,
            samples: if method == Method::Icdc { opts.samples } else { 1 },
            instances: instances.len(),
            mean_objective: objs.iter().sum::<f64>() / objs.len() as f64,
            gap_pct: 0.0,
            reference: String::new(),
            wallclock_secs: results.iter().map(|r| r.1).sum(),
        });
        objectives.push(objs);
    }
    let exact: Vec<Option<f64>> = pool.install(|| instances.par_iter().map(exact_reference).collect());
    let reference_exact = exact.iter().all(Option::is_some);
    let references: Vec<f64> = if reference_exact {
        exact.into_iter().map(Option::unwrap).collect()
    } else {
        (0..instances.len()).map(|i| objectives.iter().map(|o| o[i]).fold(f64::INFINITY, f64::min)).collect()
    };
    for (row, objs) in rows.iter_mut().zip(&objectives) {
        row.gap_pct = mean_gap_pct(objs, &references);
        row.reference = if reference_exact { "exact" } else { "best_of_report" }.into();
    }
    Ok(EvalReport { rows, objectives, references, reference_exact })
}

pub fn mean_gap_pct(objs: &[f64], refs: &[f64]) -> f64 {
    100.0 * objs.iter().zip(refs).map(|(o, r)| (o - r) / r).sum::<f64>() / objs.len() as f64
}

pub fn size_label(inst: &Instance) -> String {
    match inst.shape() {
        (a, b) if inst.family() == Family::Pmsp => format!("{a}x{b}"),
        (n, _) => n.to_string(),
    }
}
