//! Non-neural baselines and exact desk-scale oracles.
//!
//! PMSP: shortest-job-first, a genetic algorithm, particle swarm and a
//! branch-and-bound exact solver. ATSP: nearest neighbor, nearest and
//! furthest insertion, and Held-Karp.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::matrix::{Matrix, SolutionMatrix};
use crate::problems::{AtspInstance, PmspInstance};
use crate::Rng;

/// Largest city count accepted by [`held_karp`].
pub const HELD_KARP_MAX: usize = 16;
/// Largest `M^J` enumerated by [`pmsp_exact`] when `J > 20`.
pub const PMSP_EXHAUSTIVE_MAX: f64 = 1e7;

/// Shortest-job-first list scheduling.
///
/// The machine that frees earliest (lowest index on ties) takes the
/// unscheduled job with the smallest processing time on it (lowest index on
/// ties).
pub fn sjf_assignment(inst: &PmspInstance) -> Vec<usize> {
    let (jobs, machines) = (inst.jobs(), inst.machines());
    let mut free_at = vec![0.0f64; machines];
    let mut assign = vec![usize::MAX; jobs];
    for _ in 0..jobs {
        let mut m = 0;
        for k in 1..machines {
            if free_at[k] < free_at[m] {
                m = k;
            }
        }
        let mut best = usize::MAX;
        for j in 0..jobs {
            if assign[j] == usize::MAX && (best == usize::MAX || inst.proc[(j, m)] < inst.proc[(best, m)]) {
                best = j;
            }
        }
        assign[best] = m;
        free_at[m] += inst.proc[(best, m)];
    }
    assign
}

pub fn sjf(inst: &PmspInstance) -> SolutionMatrix {
    SolutionMatrix::from_assignment(&sjf_assignment(inst), inst.machines())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaConfig {
    pub population: usize,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub iterations: usize,
    pub sjf_seed: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self { population: 25, mutation_rate: 0.3, crossover_rate: 0.3, iterations: 1000, sjf_seed: true }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = 0.0..=1.0;
        if self.population < 2 || !rate.contains(&self.mutation_rate) || !rate.contains(&self.crossover_rate) {
            return Err(invalid!("GA needs population >= 2 and rates in [0, 1]"));
        }
        Ok(())
    }
}

/// Genetic algorithm over machine-index chromosomes with binary tournament
/// selection, uniform crossover, per-gene mutation and elitism.
pub fn genetic_algorithm(inst: &PmspInstance, cfg: &GaConfig, rng: &mut Rng) -> Result<SolutionMatrix> {
    cfg.validate()?;
    let (jobs, machines) = (inst.jobs(), inst.machines());
    let mut pop: Vec<Vec<usize>> = (0..cfg.population).map(|_| (0..jobs).map(|_| rng.gen_range(0..machines)).collect()).collect();
    if cfg.sjf_seed {
        pop[0] = sjf_assignment(inst);
    }
    let mut fit: Vec<f64> = pop.iter().map(|c| inst.makespan(c)).collect();
    let mut best = argmin(&fit);
    let (mut best_chrom, mut best_fit) = (pop[best].clone(), fit[best]);
    for _ in 0..cfg.iterations {
        let mut next = Vec::with_capacity(cfg.population);
        next.push(pop[best].clone());
        while next.len() < cfg.population {
            let a = tournament(&fit, rng);
            let b = tournament(&fit, rng);
            let mut child = pop[a].clone();
            if rng.gen::<f64>() < cfg.crossover_rate {
                for (g, &other) in child.iter_mut().zip(&pop[b]) {
                    if rng.gen::<bool>() {
                        *g = other;
                    }
                }
            }
            for g in child.iter_mut() {
                if rng.gen::<f64>() < cfg.mutation_rate {
                    *g = rng.gen_range(0..machines);
                }
            }
            next.push(child);
        }
        pop = next;
        fit = pop.iter().map(|c| inst.makespan(c)).collect();
        best = argmin(&fit);
        if fit[best] < best_fit {
            best_fit = fit[best];
            best_chrom = pop[best].clone();
        }
    }
    Ok(SolutionMatrix::from_assignment(&best_chrom, machines))
}

fn tournament(fit: &[f64], rng: &mut Rng) -> usize {
    let a = rng.gen_range(0..fit.len());
    let b = rng.gen_range(0..fit.len());
    if fit[b] < fit[a] {
        b
    } else {
        a
    }
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsoConfig {
    pub particles: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub iterations: usize,
    pub sjf_seed: bool,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self { particles: 25, inertia: 0.7, cognitive: 1.5, social: 1.5, iterations: 1000, sjf_seed: true }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 || !(self.inertia > 0.0 && self.inertia < 1.0) {
            return Err(invalid!("PSO needs particles >= 2 and inertia in (0, 1)"));
        }
        Ok(())
    }
}

/// Particle swarm over continuous `J × M` positions decoded by per-job argmax.
pub fn particle_swarm(inst: &PmspInstance, cfg: &PsoConfig, rng: &mut Rng) -> Result<SolutionMatrix> {
    cfg.validate()?;
    let machines = inst.machines();
    let dim = inst.jobs() * machines;
    let mut pos: Vec<Vec<f64>> = (0..cfg.particles).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect();
    if cfg.sjf_seed {
        let seed = sjf_assignment(inst);
        pos[0] = (0..dim).map(|e| if seed[e / machines] == e % machines { 1.0 } else { 0.0 }).collect();
    }
    let mut vel = vec![vec![0.0; dim]; cfg.particles];
    let decode = |x: &[f64]| -> Vec<usize> {
        x.chunks(machines)
            .map(|row| {
                let mut m = 0;
                for k in 1..machines {
                    if row[k] > row[m] {
                        m = k;
                    }
                }
                m
            })
            .collect()
    };
    let mut pbest = pos.clone();
    let mut pbest_fit: Vec<f64> = pos.iter().map(|x| inst.makespan(&decode(x))).collect();
    let mut g = argmin(&pbest_fit);
    let (mut gbest, mut gbest_fit) = (pbest[g].clone(), pbest_fit[g]);
    for _ in 0..cfg.iterations {
        for p in 0..cfg.particles {
            for k in 0..dim {
                let (r1, r2) = (rng.gen::<f64>(), rng.gen::<f64>());
                vel[p][k] = cfg.inertia * vel[p][k]
                    + cfg.cognitive * r1 * (pbest[p][k] - pos[p][k])
                    + cfg.social * r2 * (gbest[k] - pos[p][k]);
                pos[p][k] += vel[p][k];
            }
            let f = inst.makespan(&decode(&pos[p]));
            if f < pbest_fit[p] {
                pbest_fit[p] = f;
                pbest[p] = pos[p].clone();
            }
        }
        g = argmin(&pbest_fit);
        if pbest_fit[g] < gbest_fit {
            gbest_fit = pbest_fit[g];
            gbest = pbest[g].clone();
        }
    }
    Ok(SolutionMatrix::from_assignment(&decode(&gbest), machines))
}

/// Exact minimum-makespan assignment by depth-first branch and bound, seeded
/// with the SJF makespan.
pub fn pmsp_exact(inst: &PmspInstance) -> Result<(SolutionMatrix, f64)> {
    let (jobs, machines) = (inst.jobs(), inst.machines());
    if jobs > 20 && libm::pow(machines as f64, jobs as f64) > PMSP_EXHAUSTIVE_MAX {
        return Err(Error::UnsupportedSize(alloc::format!("PMSP {jobs}x{machines} exceeds the exact solver's reach")));
    }
    // Jobs with large minimum processing time first tighten the bound early.
    let mut order: Vec<usize> = (0..jobs).collect();
    let min_proc = |j: usize| (0..machines).map(|m| inst.proc[(j, m)]).fold(f64::INFINITY, f64::min);
    order.sort_by(|&a, &b| min_proc(b).total_cmp(&min_proc(a)).then(a.cmp(&b)));
    let mut remaining_min = vec![0.0; jobs + 1];
    for k in (0..jobs).rev() {
        remaining_min[k] = remaining_min[k + 1] + min_proc(order[k]);
    }

    struct Search<'a> {
        inst: &'a PmspInstance,
        order: Vec<usize>,
        remaining_min: Vec<f64>,
        load: Vec<f64>,
        assign: Vec<usize>,
        best: f64,
        best_assign: Vec<usize>,
    }

    impl Search<'_> {
        fn go(&mut self, k: usize, current: f64) {
            if k == self.order.len() {
                if current < self.best {
                    self.best = current;
                    self.best_assign = self.assign.clone();
                }
                return;
            }
            let total: f64 = self.load.iter().sum();
            let machines = self.load.len() as f64;
            if current.max((total + self.remaining_min[k]) / machines) >= self.best {
                return;
            }
            let j = self.order[k];
            for m in 0..self.load.len() {
                let next = self.load[m] + self.inst.proc[(j, m)];
                if next >= self.best {
                    continue;
                }
                self.load[m] = next;
                self.assign[j] = m;
                self.go(k + 1, current.max(next));
                self.load[m] -= self.inst.proc[(j, m)];
            }
        }
    }

    let seed = sjf_assignment(inst);
    let mut s = Search {
        inst,
        order,
        remaining_min,
        load: vec![0.0; machines],
        assign: vec![0; jobs],
        best: inst.makespan(&seed),
        best_assign: seed,
    };
    s.go(0, 0.0);
    let best_assign = s.best_assign;
    let makespan = inst.makespan(&best_assign);
    Ok((SolutionMatrix::from_assignment(&best_assign, machines), makespan))
}

/// Tour construction rules for routing costs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Construction {
    NearestNeighbor,
    NearestInsertion,
    FurthestInsertion,
}

/// City order produced by `rule` on the (possibly asymmetric) `costs`.
pub fn construct_tour(costs: &Matrix, rule: Construction) -> Result<Vec<usize>> {
    let n = costs.rows();
    if n < 2 || costs.cols() != n {
        return Err(invalid!("tour construction needs a square cost matrix with n >= 2"));
    }
    let mut in_tour = vec![false; n];
    in_tour[0] = true;
    if rule == Construction::NearestNeighbor {
        let mut order = vec![0];
        let mut city = 0;
        for _ in 1..n {
            let next = (0..n).filter(|&j| !in_tour[j]).fold(usize::MAX, |best, j| {
                if best == usize::MAX || costs[(city, j)] < costs[(city, best)] {
                    j
                } else {
                    best
                }
            });
            in_tour[next] = true;
            order.push(next);
            city = next;
        }
        return Ok(order);
    }
    // distance from each outside city to the tour, in either direction
    let gap = |a: usize, b: usize| costs[(a, b)].min(costs[(b, a)]);
    let mut dist_to_tour: Vec<f64> = (0..n).map(|j| gap(0, j)).collect();
    let mut order = vec![0];
    for _ in 1..n {
        let mut pick = usize::MAX;
        for j in (0..n).filter(|&j| !in_tour[j]) {
            let better = match rule {
                Construction::NearestInsertion => dist_to_tour[j] < dist_to_tour.get(pick).copied().unwrap_or(f64::INFINITY),
                _ => dist_to_tour[j] > dist_to_tour.get(pick).copied().unwrap_or(f64::NEG_INFINITY),
            };
            if pick == usize::MAX || better {
                pick = j;
            }
        }
        let mut best_pos = 0;
        let mut best_delta = f64::INFINITY;
        for p in 0..order.len() {
            let a = order[p];
            let b = order[(p + 1) % order.len()];
            let delta = if order.len() == 1 {
                costs[(a, pick)] + costs[(pick, a)]
            } else {
                costs[(a, pick)] + costs[(pick, b)] - costs[(a, b)]
            };
            if delta < best_delta {
                best_delta = delta;
                best_pos = p + 1;
            }
        }
        order.insert(best_pos, pick);
        in_tour[pick] = true;
        for j in 0..n {
            dist_to_tour[j] = dist_to_tour[j].min(gap(pick, j));
        }
    }
    Ok(order)
}

pub fn nearest_neighbor(inst: &AtspInstance) -> Result<SolutionMatrix> {
    construct_tour(&inst.dist, Construction::NearestNeighbor).map(|o| SolutionMatrix::from_tour(&o))
}

pub fn nearest_insertion(inst: &AtspInstance) -> Result<SolutionMatrix> {
    construct_tour(&inst.dist, Construction::NearestInsertion).map(|o| SolutionMatrix::from_tour(&o))
}

pub fn furthest_insertion(inst: &AtspInstance) -> Result<SolutionMatrix> {
    construct_tour(&inst.dist, Construction::FurthestInsertion).map(|o| SolutionMatrix::from_tour(&o))
}

/// Optimal tour of `costs` by dynamic programming over subsets.
pub fn held_karp_costs(costs: &Matrix) -> Result<(Vec<usize>, f64)> {
    let n = costs.rows();
    if n < 2 || costs.cols() != n {
        return Err(invalid!("Held-Karp needs a square cost matrix with n >= 2"));
    }
    if n > HELD_KARP_MAX {
        return Err(Error::UnsupportedSize(alloc::format!("Held-Karp supports n <= {HELD_KARP_MAX}, got {n}")));
    }
    // Subsets of cities 1..n; bit k stands for city k + 1.
    let m = n - 1;
    let full = (1usize << m) - 1;
    let idx = |mask: usize, last: usize| mask * m + last;
    let mut dp = vec![f64::INFINITY; (full + 1) * m];
    let mut parent = vec![usize::MAX; (full + 1) * m];
    for k in 0..m {
        dp[idx(1 << k, k)] = costs[(0, k + 1)];
    }
    for mask in 1..=full {
        for last in 0..m {
            let cur = dp[idx(mask, last)];
            if mask & (1 << last) == 0 || !cur.is_finite() {
                continue;
            }
            for next in 0..m {
                if mask & (1 << next) != 0 {
                    continue;
                }
                let nm = mask | (1 << next);
                let cand = cur + costs[(last + 1, next + 1)];
                if cand < dp[idx(nm, next)] {
                    dp[idx(nm, next)] = cand;
                    parent[idx(nm, next)] = last;
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut last = 0;
    for k in 0..m {
        let c = dp[idx(full, k)] + costs[(k + 1, 0)];
        if c < best {
            best = c;
            last = k;
        }
    }
    let mut rev = Vec::with_capacity(n);
    let mut mask = full;
    let mut cur = last;
    while cur != usize::MAX {
        rev.push(cur + 1);
        let p = parent[idx(mask, cur)];
        mask &= !(1 << cur);
        cur = p;
    }
    rev.push(0);
    rev.reverse();
    Ok((rev, best))
}

/// Optimal ATSP tour and its length.
pub fn held_karp(inst: &AtspInstance) -> Result<(SolutionMatrix, f64)> {
    let (order, len) = held_karp_costs(&inst.dist)?;
    Ok((SolutionMatrix::from_tour(&order), len))
}
