//! Problem families, instance generators, scoring and feasibility.
//!
//! Every family is posed over two item sets `A` (rows) and `B` (columns) and a
//! binary solution matrix `X ∈ {0,1}^{|A|×|B|}`:
//!
//! * ATSP: `A = B =` cities, `X[i][j] = 1` when the tour goes from `i` to `j`.
//! * PMSP: `A =` jobs, `B =` machines, `X[j][m] = 1` when job `j` runs on `m`.
//! * NAV: an ATSP whose travel times are derived from coordinates,
//!   reciprocal speeds and traffic.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::matrix::{Matrix, SolutionMatrix};
use crate::{rng_from_seed, Rng};

/// Scale of the integer distances drawn before normalization.
pub const TMAT_SCALE: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Atsp,
    Pmsp,
    Nav,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Atsp => "atsp",
            Family::Pmsp => "pmsp",
            Family::Nav => "nav",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "atsp" => Some(Family::Atsp),
            "pmsp" => Some(Family::Pmsp),
            "nav" => Some(Family::Nav),
            _ => None,
        }
    }

    /// Whether solutions are directed Hamiltonian cycles.
    pub fn is_routing(self) -> bool {
        !matches!(self, Family::Pmsp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtspInstance {
    pub dist: Matrix,
    /// Set when triangle tightening has been applied.
    pub tmat: bool,
}

impl AtspInstance {
    pub fn new(dist: Matrix, tmat: bool) -> Result<Self> {
        let (r, c) = dist.shape();
        if r != c || r < 2 {
            return Err(invalid!("ATSP distance matrix must be square with n >= 2, got {r}x{c}"));
        }
        for i in 0..r {
            for j in 0..r {
                let d = dist[(i, j)];
                if i == j && d != 0.0 {
                    return Err(invalid!("ATSP diagonal entry ({i},{i}) must be zero"));
                }
                if i != j && !(d > 0.0 && d.is_finite()) {
                    return Err(invalid!("ATSP entry ({i},{j}) must be positive and finite"));
                }
            }
        }
        Ok(Self { dist, tmat })
    }

    pub fn n(&self) -> usize {
        self.dist.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmspInstance {
    /// `J × M` processing times.
    pub proc: Matrix,
}

impl PmspInstance {
    pub fn new(proc: Matrix) -> Result<Self> {
        let (j, m) = proc.shape();
        if j == 0 || m == 0 {
            return Err(invalid!("PMSP needs at least one job and one machine"));
        }
        if !proc.as_slice().iter().all(|&p| p > 0.0 && p.is_finite()) {
            return Err(invalid!("PMSP processing times must be positive and finite"));
        }
        Ok(Self { proc })
    }

    pub fn jobs(&self) -> usize {
        self.proc.rows()
    }

    pub fn machines(&self) -> usize {
        self.proc.cols()
    }

    /// Makespan of a job → machine assignment.
    pub fn makespan(&self, assign: &[usize]) -> f64 {
        let mut load = vec![0.0; self.machines()];
        for (j, &m) in assign.iter().enumerate() {
            load[m] += self.proc[(j, m)];
        }
        load.into_iter().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NavInstance {
    /// `n × 2` city coordinates.
    pub coords: Matrix,
    /// `n × n` reciprocal speeds.
    pub speed_recip: Matrix,
    /// `n × n` traffic delays.
    pub traffic: Matrix,
    time: Matrix,
}

impl NavInstance {
    pub fn new(coords: Matrix, speed_recip: Matrix, traffic: Matrix) -> Result<Self> {
        let n = coords.rows();
        if n < 2 || coords.cols() != 2 {
            return Err(invalid!("NAV coordinates must be n x 2 with n >= 2"));
        }
        if speed_recip.shape() != (n, n) || traffic.shape() != (n, n) {
            return Err(invalid!("NAV speed and traffic matrices must be {n}x{n}"));
        }
        let time = travel_time_matrix(&coords, &speed_recip, &traffic);
        Ok(Self { coords, speed_recip, traffic, time })
    }

    pub fn n(&self) -> usize {
        self.coords.rows()
    }

    /// Derived travel-time matrix `T^a`.
    pub fn time_matrix(&self) -> &Matrix {
        &self.time
    }
}

fn travel_time_matrix(coords: &Matrix, speed_recip: &Matrix, traffic: &Matrix) -> Matrix {
    Matrix::from_fn(coords.rows(), coords.rows(), |i, j| {
        let dx = coords[(i, 0)] - coords[(j, 0)];
        let dy = coords[(i, 1)] - coords[(j, 1)];
        (dx * dx + dy * dy) * speed_recip[(i, j)] + traffic[(i, j)]
    })
}

/// Travel time `‖r_i − r_j‖² · S_ij + F_ij` for every ordered pair.
pub fn nav_to_time_matrix(inst: &NavInstance) -> Matrix {
    inst.time.clone()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Instance {
    Atsp(AtspInstance),
    Pmsp(PmspInstance),
    Nav(NavInstance),
}

impl Instance {
    pub fn family(&self) -> Family {
        match self {
            Instance::Atsp(_) => Family::Atsp,
            Instance::Pmsp(_) => Family::Pmsp,
            Instance::Nav(_) => Family::Nav,
        }
    }

    /// `(|A|, |B|)`.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Instance::Atsp(a) => (a.n(), a.n()),
            Instance::Pmsp(p) => p.proc.shape(),
            Instance::Nav(v) => (v.n(), v.n()),
        }
    }

    /// Cost matrix summed along a tour, for routing families.
    pub fn route_costs(&self) -> Option<&Matrix> {
        match self {
            Instance::Atsp(a) => Some(&a.dist),
            Instance::Nav(v) => Some(&v.time),
            Instance::Pmsp(_) => None,
        }
    }

    /// Relation channels `D` fed to the encoder (`S ‖ F` for NAV).
    pub fn relations(&self) -> Vec<&Matrix> {
        match self {
            Instance::Atsp(a) => vec![&a.dist],
            Instance::Pmsp(p) => vec![&p.proc],
            Instance::Nav(v) => vec![&v.speed_recip, &v.traffic],
        }
    }
}

/// Reward of a solution: the score when feasible, otherwise a sentinel that
/// orders strictly below every score.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub enum Reward {
    Infeasible,
    Score(f64),
}

impl Reward {
    pub fn score(self) -> Option<f64> {
        match self {
            Reward::Score(s) => Some(s),
            Reward::Infeasible => None,
        }
    }

    pub fn is_feasible(self) -> bool {
        matches!(self, Reward::Score(_))
    }

    /// Total order with `Infeasible` lowest; scores compare by value.
    pub fn total_cmp(&self, other: &Reward) -> Ordering {
        match (self, other) {
            (Reward::Infeasible, Reward::Infeasible) => Ordering::Equal,
            (Reward::Infeasible, _) => Ordering::Less,
            (_, Reward::Infeasible) => Ordering::Greater,
            (Reward::Score(a), Reward::Score(b)) => a.total_cmp(b),
        }
    }
}

/// Random Tmat-class ATSP instance.
///
/// Distances are integers uniform in `[1, TMAT_SCALE]`, tightened with
/// `d_ij ← min(d_ij, d_ik + d_kj)` until nothing changes, then divided by
/// `TMAT_SCALE`.
pub fn generate_tmat_atsp(n: usize, seed: u64) -> Result<AtspInstance> {
    if n < 2 {
        return Err(invalid!("ATSP needs n >= 2, got {n}"));
    }
    let mut rng = rng_from_seed(seed);
    let mut d: Vec<u64> = (0..n * n)
        .map(|e| if e / n == e % n { 0 } else { rng.gen_range(1..=TMAT_SCALE) })
        .collect();
    loop {
        let mut changed = false;
        for k in 0..n {
            for i in 0..n {
                let dik = d[i * n + k];
                for j in 0..n {
                    let via = dik + d[k * n + j];
                    if via < d[i * n + j] {
                        d[i * n + j] = via;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let dist = Matrix::from_fn(n, n, |i, j| d[i * n + j] as f64 / TMAT_SCALE as f64);
    Ok(AtspInstance { dist, tmat: true })
}

/// Random unrelated-machines PMSP instance with processing times in `(0, 1]`.
pub fn generate_pmsp(jobs: usize, machines: usize, seed: u64) -> Result<PmspInstance> {
    if jobs == 0 || machines == 0 {
        return Err(invalid!("PMSP needs jobs >= 1 and machines >= 1"));
    }
    let mut rng = rng_from_seed(seed);
    // 1 - U[0,1) lies in (0, 1]
    let proc = Matrix::from_fn(jobs, machines, |_, _| 1.0 - rng.gen::<f64>());
    Ok(PmspInstance { proc })
}

/// Random navigation instance with every raw field uniform in `[0, 1]`.
pub fn generate_nav(n: usize, seed: u64) -> Result<NavInstance> {
    if n < 2 {
        return Err(invalid!("NAV needs n >= 2, got {n}"));
    }
    let mut rng = rng_from_seed(seed);
    let coords = Matrix::from_fn(n, 2, |_, _| rng.gen::<f64>());
    let speed_recip = Matrix::from_fn(n, n, |_, _| rng.gen::<f64>());
    let traffic = Matrix::from_fn(n, n, |_, _| rng.gen::<f64>());
    NavInstance::new(coords, speed_recip, traffic)
}

/// Generates an instance of `family`; `size` is `(n, n)` for routing
/// families and `(jobs, machines)` for PMSP.
pub fn generate(family: Family, size: (usize, usize), seed: u64) -> Result<Instance> {
    Ok(match family {
        Family::Atsp => Instance::Atsp(generate_tmat_atsp(size.0, seed)?),
        Family::Pmsp => Instance::Pmsp(generate_pmsp(size.0, size.1, seed)?),
        Family::Nav => Instance::Nav(generate_nav(size.0, seed)?),
    })
}

/// Checks feasibility of `x` for `instance`.
///
/// Routing: `x` is the adjacency matrix of a single directed Hamiltonian
/// cycle. PMSP: every job row has exactly one machine.
pub fn is_feasible(instance: &Instance, x: &SolutionMatrix) -> Result<bool> {
    if x.shape() != instance.shape() {
        return Err(invalid!(
            "solution shape {:?} does not match instance shape {:?}",
            x.shape(),
            instance.shape()
        ));
    }
    Ok(match instance.family() {
        Family::Pmsp => (0..x.rows()).all(|j| x.row_sum(j) == 1),
        Family::Atsp | Family::Nav => is_hamiltonian_cycle(x),
    })
}

fn is_hamiltonian_cycle(x: &SolutionMatrix) -> bool {
    let n = x.rows();
    if (0..n).any(|j| x.col_sum(j) != 1) {
        return false;
    }
    let mut succ = Vec::with_capacity(n);
    for i in 0..n {
        match x.row_single(i) {
            Some(j) => succ.push(j),
            None => return false,
        }
    }
    let mut city = 0;
    for step in 1..=n {
        city = succ[city];
        if city == 0 {
            return step == n;
        }
    }
    false
}

/// Successor list of a feasible tour.
pub fn tour_successors(x: &SolutionMatrix) -> Option<Vec<usize>> {
    (0..x.rows()).map(|i| x.row_single(i)).collect()
}

/// City order of a feasible tour starting at city 0.
pub fn tour_order(x: &SolutionMatrix) -> Option<Vec<usize>> {
    let succ = tour_successors(x)?;
    let mut order = Vec::with_capacity(succ.len());
    let mut c = 0;
    for _ in 0..succ.len() {
        order.push(c);
        c = succ[c];
    }
    Some(order)
}

/// Objective of a feasible solution: negated tour length or negated makespan.
///
/// The caller must have checked feasibility; the value is meaningless
/// otherwise.
pub fn score(instance: &Instance, x: &SolutionMatrix) -> f64 {
    debug_assert_eq!(x.shape(), instance.shape());
    match instance {
        Instance::Pmsp(p) => {
            let mut best = 0.0f64;
            for m in 0..p.machines() {
                let load: f64 = (0..p.jobs()).filter(|&j| x.get(j, m)).map(|j| p.proc[(j, m)]).sum();
                best = best.max(load);
            }
            -best
        }
        _ => {
            let d = instance.route_costs().expect("routing family");
            let mut total = 0.0;
            for (e, &b) in x.bits().iter().enumerate() {
                if b {
                    total += d.as_slice()[e];
                }
            }
            -total
        }
    }
}

/// Minimization objective (tour length or makespan) of a feasible solution.
pub fn objective(instance: &Instance, x: &SolutionMatrix) -> f64 {
    -score(instance, x)
}

pub fn reward(instance: &Instance, x: &SolutionMatrix) -> Reward {
    match is_feasible(instance, x) {
        Ok(true) => Reward::Score(score(instance, x)),
        _ => Reward::Infeasible,
    }
}

/// Uniform draw from the feasible set.
pub fn feasible_prior_sample(instance: &Instance, rng: &mut Rng) -> SolutionMatrix {
    let (rows, cols) = instance.shape();
    match instance.family() {
        Family::Pmsp => {
            let assign: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
            SolutionMatrix::from_assignment(&assign, cols)
        }
        Family::Atsp | Family::Nav => {
            let mut order: Vec<usize> = (0..rows).collect();
            order[1..].shuffle(rng);
            SolutionMatrix::from_tour(&order)
        }
    }
}

/// Which PMSP prior marginal to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QbarMode {
    /// `[1 − 1/M, 1/M]`, the exact marginal of one-machine-per-job matrices.
    #[default]
    ExactMarginal,
    /// `[1 − 1/J, 1/J]`.
    JobCount,
}

impl QbarMode {
    pub fn name(self) -> &'static str {
        match self {
            QbarMode::ExactMarginal => "exact",
            QbarMode::JobCount => "jobs",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "exact" => Some(QbarMode::ExactMarginal),
            "jobs" => Some(QbarMode::JobCount),
            _ => None,
        }
    }
}

/// Limiting per-element distribution `[P(x = 0), P(x = 1)]` of the corruption
/// process, matched to the marginal of feasible solutions.
pub fn qbar(instance: &Instance, mode: QbarMode) -> [f64; 2] {
    let (rows, cols) = instance.shape();
    qbar_for(instance.family(), rows, cols, mode)
}

pub fn qbar_for(family: Family, rows: usize, cols: usize, mode: QbarMode) -> [f64; 2] {
    let k = match (family, mode) {
        (Family::Pmsp, QbarMode::ExactMarginal) => cols,
        (Family::Pmsp, QbarMode::JobCount) => rows,
        _ => rows,
    } as f64;
    [1.0 - 1.0 / k, 1.0 / k]
}
