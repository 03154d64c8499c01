//! Surrogate-target training: a reward-weighted replay buffer feeds the
//! cloning losses, and a REINFORCE improvement step both updates the model and
//! refreshes the buffer with its own generations.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;

use crate::decoding::{decode_logprob_var, full_reverse_generate, ChoiceScore, DecodeMode};
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::matrix::{Matrix, SolutionMatrix};
use crate::model::{IcdcModel, NormMode};
use crate::problems::{feasible_prior_sample, generate, reward, Family, Instance, Reward};
use crate::tape::{Tape, Var};
use crate::Rng;

/// One stored solution of the surrogate target.
#[derive(Clone, Debug)]
pub struct BufferEntry {
    pub instance: Arc<Instance>,
    pub x0: SolutionMatrix,
    pub reward: f64,
}

/// Which entries compete in the `exp(R)` weighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BufferWeighting {
    /// An instance is drawn uniformly, then one of its stored solutions with
    /// probability `∝ exp((R − max R) / κ)` among that instance's entries.
    #[default]
    PerInstance,
    /// One draw `∝ exp((R − max R) / κ)` over the whole buffer.
    Global,
}

impl BufferWeighting {
    pub fn name(self) -> &'static str {
        match self {
            BufferWeighting::PerInstance => "per_instance",
            BufferWeighting::Global => "global",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "per_instance" => Some(BufferWeighting::PerInstance),
            "global" => Some(BufferWeighting::Global),
            _ => None,
        }
    }
}

/// FIFO store of feasible solutions with reward-weighted sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    entries: VecDeque<BufferEntry>,
    capacity: usize,
    kappa: f64,
    weighting: BufferWeighting,
    rejected: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, kappa: f64) -> Result<Self> {
        Self::with_weighting(capacity, kappa, BufferWeighting::default())
    }

    pub fn with_weighting(capacity: usize, kappa: f64, weighting: BufferWeighting) -> Result<Self> {
        if capacity == 0 || !(kappa > 0.0) {
            return Err(invalid!("buffer needs capacity >= 1 and kappa > 0"));
        }
        Ok(Self { entries: VecDeque::with_capacity(capacity), capacity, kappa, weighting, rejected: 0 })
    }

    pub fn weighting(&self) -> BufferWeighting {
        self.weighting
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of infeasible pushes that were dropped.
    pub fn rejected(&self) -> usize {
        self.rejected
    }

    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    /// Stores `x0` with its reward; infeasible solutions only bump the reject
    /// counter.
    pub fn push(&mut self, instance: Arc<Instance>, x0: SolutionMatrix) {
        let Reward::Score(r) = reward(&instance, &x0) else {
            self.rejected += 1;
            return;
        };
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(BufferEntry { instance, x0, reward: r });
    }

    /// Probability of drawing each entry, in buffer order.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.entries.len()];
        let groups = self.groups();
        let share = 1.0 / groups.len() as f64;
        for members in &groups {
            for (&i, w) in members.iter().zip(self.shifted_weights(members)) {
                p[i] = share * w;
            }
        }
        p
    }

    /// Index sets that compete in the weighting.
    fn groups(&self) -> Vec<Vec<usize>> {
        match self.weighting {
            BufferWeighting::Global => vec![(0..self.entries.len()).collect()],
            BufferWeighting::PerInstance => {
                let mut by_instance: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (i, e) in self.entries.iter().enumerate() {
                    by_instance.entry(Arc::as_ptr(&e.instance) as usize).or_default().push(i);
                }
                let mut groups: Vec<Vec<usize>> = by_instance.into_values().collect();
                groups.sort_by_key(|g| g[0]);
                groups
            }
        }
    }

    /// `exp((R − max R)/κ)` over `members`, normalized.
    fn shifted_weights(&self, members: &[usize]) -> Vec<f64> {
        let max = members.iter().map(|&i| self.entries[i].reward).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = members.iter().map(|&i| math::exp((self.entries[i].reward - max) / self.kappa)).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    /// Draws `batch` entries with replacement.
    pub fn sample(&self, batch: usize, rng: &mut Rng) -> Result<Vec<&BufferEntry>> {
        if self.entries.is_empty() {
            return Err(Error::Unavailable("replay buffer is empty".into()));
        }
        let groups = self.groups();
        let dists = groups
            .iter()
            .map(|g| WeightedIndex::new(self.shifted_weights(g)).map_err(|e| invalid!("buffer weights: {e}")))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..batch)
            .map(|_| {
                let g = rng.gen_range(0..groups.len());
                &self.entries[groups[g][dists[g].sample(rng)]]
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub family: Family,
    /// Training instance size `(|A|, |B|)`.
    pub size: (usize, usize),
    /// Learning rate `γ`.
    pub learning_rate: f64,
    /// When set, the rate follows a cosine from `learning_rate` down to this
    /// value over `epochs` iterations.
    pub final_learning_rate: Option<f64>,
    /// Mix ratio `α` of model generations in the buffer.
    pub alpha: f64,
    /// Weight `λ₁` of the prediction loss.
    pub lambda_prd: f64,
    /// Weight `λ₂` of the constraint loss.
    pub lambda_cst: f64,
    /// Cloning minibatch steps `M` per improvement step.
    pub cloning_steps: usize,
    /// Generations `N` per improvement step.
    pub samples: usize,
    /// Generations per instance in an improvement step; with more than one,
    /// each instance's generations share their own mean baseline.
    pub rollouts_per_instance: usize,
    /// Gumbel-softmax temperature `τ`.
    pub tau: f64,
    /// Buffer sampling temperature `κ`.
    pub kappa: f64,
    pub weighting: BufferWeighting,
    pub batch_size: usize,
    /// Outer iterations (cloning block plus one improvement step).
    pub epochs: usize,
    /// Buffer capacity; `None` means `10 · N / α`.
    pub capacity: Option<usize>,
    /// Reverse-process stride used for improvement generations.
    pub stride: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(family: Family, size: (usize, usize)) -> Self {
        Self {
            family,
            size,
            learning_rate: 4e-4,
            final_learning_rate: None,
            alpha: 0.5,
            lambda_prd: 1e-3,
            lambda_cst: 1e-6,
            cloning_steps: 30,
            samples: 64,
            rollouts_per_instance: 1,
            tau: 1.0,
            kappa: 1.0,
            weighting: BufferWeighting::PerInstance,
            batch_size: 16,
            epochs: 100,
            capacity: None,
            stride: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.final_learning_rate.is_some_and(|f| !(f > 0.0)) {
            return Err(invalid!("learning rates must be > 0"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(invalid!("alpha must lie in (0, 1]"));
        }
        if !(self.lambda_prd >= 0.0 && self.lambda_cst >= 0.0) {
            return Err(invalid!("loss weights must be >= 0"));
        }
        if self.cloning_steps == 0 || self.batch_size == 0 || self.stride == 0 {
            return Err(invalid!("cloning_steps, batch_size and stride must be >= 1"));
        }
        if self.samples < 2 {
            return Err(invalid!("samples must be >= 2 for the mean baseline"));
        }
        if self.rollouts_per_instance == 0 || !self.samples.is_multiple_of(self.rollouts_per_instance) {
            return Err(invalid!("rollouts_per_instance must divide samples"));
        }
        if !(self.tau > 0.0 && self.kappa > 0.0) {
            return Err(invalid!("tau and kappa must be > 0"));
        }
        if self.capacity == Some(0) {
            return Err(invalid!("capacity must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate for outer iteration `it` (0-based).
    pub fn learning_rate_at(&self, it: usize) -> f64 {
        match self.final_learning_rate {
            Some(f) if self.epochs > 0 => {
                let frac = (it.min(self.epochs) as f64) / self.epochs as f64;
                f + 0.5 * (self.learning_rate - f) * (1.0 + math::cos(core::f64::consts::PI * frac))
            }
            _ => self.learning_rate,
        }
    }

    pub fn buffer_capacity(&self) -> usize {
        self.capacity.unwrap_or_else(|| libm::ceil(10.0 * self.samples as f64 / self.alpha) as usize)
    }

    /// Prior samples added alongside each batch of `N` generations.
    pub fn prior_per_improvement(&self) -> usize {
        libm::ceil((1.0 - self.alpha) / self.alpha * self.samples as f64 - 1e-9) as usize
    }
}

/// Variational-bound term: `Σ_e KL(q(x_{t−1} | x_t, x_0) ‖ p_θ(x_{t−1} | x_t))`
/// for `2 ≤ t ≤ T`, where the model side mixes the posterior over `x_0`
/// with the softmax of `logits`.
pub fn vb_term(tape: &mut Tape, logits: Var, x0: &SolutionMatrix, xt: &SolutionMatrix, t: usize, sched: &NoiseSchedule) -> Result<Var> {
    let n = x0.len();
    if tape.value(logits).shape() != (n, 2) || xt.shape() != x0.shape() {
        return Err(invalid!("VB operands disagree in shape"));
    }
    let q = sched.posterior(xt, x0, t)?;
    let coeff = |bit: usize| {
        let c = sched.reverse_coefficients(bit, t, 1);
        Matrix::from_rows(&c).expect("2x2")
    };
    let probs = tape.softmax_rows(logits);
    let c0 = tape.constant(coeff(0));
    let c1 = tape.constant(coeff(1));
    let un0 = tape.matmul(probs, c0);
    let un1 = tape.matmul(probs, c1);
    let m0 = tape.constant(Matrix::from_fn(n, 1, |e, _| if xt.bits()[e] { 0.0 } else { 1.0 }));
    let m1 = tape.constant(Matrix::from_fn(n, 1, |e, _| if xt.bits()[e] { 1.0 } else { 0.0 }));
    let un0 = tape.mul_col(un0, m0);
    let un1 = tape.mul_col(un1, m1);
    let un = tape.add(un0, un1);
    let z = tape.row_sums(un);
    let ln_z = tape.ln(z);
    let neg_ln_z = tape.scale(ln_z, -1.0);
    let ln_un = tape.ln(un);
    let ln_p = tape.add_col(ln_un, neg_ln_z);
    let ln_q = tape.constant(q.map(math::ln_floor));
    let diff = tape.sub(ln_q, ln_p);
    let qc = tape.constant(q);
    let kl = tape.mul(qc, diff);
    Ok(tape.sum_all(kl))
}

/// Prediction term: `−Σ_e ln p_θ(x_0 = X_0[e])`.
pub fn prd_term(tape: &mut Tape, logits: Var, x0: &SolutionMatrix) -> Result<Var> {
    let n = x0.len();
    if tape.value(logits).shape() != (n, 2) {
        return Err(invalid!("prediction operands disagree in shape"));
    }
    let lsm = tape.log_softmax_rows(logits);
    let onehot = tape.constant(Matrix::from_fn(n, 2, |e, k| (x0.bits()[e] as usize == k) as u8 as f64));
    let picked = tape.mul(lsm, onehot);
    let s = tape.sum_all(picked);
    Ok(tape.scale(s, -1.0))
}

/// Constraint term on the Gumbel-softmax relaxation of `X_0`: squared
/// deviations of row sums (and, for routing, column sums) from one.
/// `gumbel` holds the frozen noise (`|A||B| × 2`).
pub fn cst_term(tape: &mut Tape, logits: Var, family: Family, shape: (usize, usize), gumbel: &Matrix, tau: f64) -> Result<Var> {
    let (rows, cols) = shape;
    if tape.value(logits).shape() != (rows * cols, 2) || gumbel.shape() != (rows * cols, 2) {
        return Err(invalid!("constraint operands disagree in shape"));
    }
    if !(tau > 0.0) {
        return Err(invalid!("tau must be > 0"));
    }
    let g = tape.constant(gumbel.clone());
    let noisy = tape.add(logits, g);
    let noisy = tape.scale(noisy, 1.0 / tau);
    let relaxed = tape.softmax_rows(noisy);
    let ones = tape.column(relaxed, 1);
    let grid = tape.reshape(ones, rows, cols);
    let rs = tape.row_sums(grid);
    let mut total = squared_dev(tape, rs);
    if family.is_routing() {
        let cs = tape.col_sums(grid);
        let dev = squared_dev(tape, cs);
        total = tape.add(total, dev);
    }
    Ok(total)
}

fn squared_dev(tape: &mut Tape, sums: Var) -> Var {
    let d = tape.add_scalar(sums, -1.0);
    let sq = tape.square(d);
    tape.sum_all(sq)
}

/// Standard Gumbel noise for [`cst_term`].
pub fn draw_gumbel(n: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(n, 2, |_, _| math::gumbel(rng))
}

/// The random quantities of one cloning-loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct CloningDraw {
    pub t: usize,
    pub xt: SolutionMatrix,
    pub gumbel: Matrix,
}

impl CloningDraw {
    /// `t ~ U{1..T}`, `X_t ~ q(X_t | X_0)` and fresh Gumbel noise.
    pub fn sample(sched: &NoiseSchedule, x0: &SolutionMatrix, rng: &mut Rng) -> Result<Self> {
        let t = rng.gen_range(1..=sched.steps());
        Self::at(sched, x0, t, rng)
    }

    /// As [`CloningDraw::sample`] with a fixed `t`.
    pub fn at(sched: &NoiseSchedule, x0: &SolutionMatrix, t: usize, rng: &mut Rng) -> Result<Self> {
        let xt = sched.forward_sample(x0, t, rng)?;
        let gumbel = draw_gumbel(x0.len(), rng);
        Ok(Self { t, xt, gumbel })
    }
}

/// Components of the cloning loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub vb: f64,
    pub prd: f64,
    pub cst: f64,
    /// `vb + λ₁ prd + λ₂ cst`.
    pub total: f64,
}

impl LossReport {
    fn add_scaled(&mut self, other: &LossReport, k: f64) {
        self.vb += k * other.vb;
        self.prd += k * other.prd;
        self.cst += k * other.cst;
        self.total += k * other.total;
    }
}

/// Cloning loss of one `(instance, X_0)` pair built on `f`'s tape; returns the
/// loss node and its components.
pub fn cloning_loss(
    f: &mut crate::model::Forward<'_>,
    instance: &Instance,
    x0: &SolutionMatrix,
    draw: &CloningDraw,
    sched: &NoiseSchedule,
    lambda_prd: f64,
    lambda_cst: f64,
    tau: f64,
) -> Result<(Var, LossReport)> {
    let feats = f.model().features(instance)?;
    let logits = f.logits(&feats, &draw.xt, draw.t)?;
    let prd = prd_term(&mut f.tape, logits, x0)?;
    let cst = cst_term(&mut f.tape, logits, instance.family(), instance.shape(), &draw.gumbel, tau)?;
    let mut report = LossReport { prd: f.tape.scalar(prd), cst: f.tape.scalar(cst), ..Default::default() };
    let wp = f.tape.scale(prd, lambda_prd);
    let wc = f.tape.scale(cst, lambda_cst);
    let mut total = f.tape.add(wp, wc);
    if draw.t >= 2 {
        let vb = vb_term(&mut f.tape, logits, x0, &draw.xt, draw.t, sched)?;
        report.vb = f.tape.scalar(vb);
        total = f.tape.add(total, vb);
    }
    report.total = f.tape.scalar(total);
    Ok((total, report))
}

/// `L_VB` with fresh draws of `X_t`.
pub fn loss_vb(model: &IcdcModel, instance: &Instance, x0: &SolutionMatrix, t: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Result<f64> {
    if t < 2 {
        return Err(invalid!("the VB term needs t >= 2"));
    }
    let xt = sched.forward_sample(x0, t, rng)?;
    let mut f = model.forward(NormMode::Batch);
    let feats = model.features(instance)?;
    let logits = f.logits(&feats, &xt, t)?;
    let v = vb_term(&mut f.tape, logits, x0, &xt, t, sched)?;
    Ok(f.tape.scalar(v))
}

/// `L_prd` with a fresh draw of `X_t`.
pub fn loss_prd(model: &IcdcModel, instance: &Instance, x0: &SolutionMatrix, t: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Result<f64> {
    let xt = sched.forward_sample(x0, t, rng)?;
    let mut f = model.forward(NormMode::Batch);
    let feats = model.features(instance)?;
    let logits = f.logits(&feats, &xt, t)?;
    let v = prd_term(&mut f.tape, logits, x0)?;
    Ok(f.tape.scalar(v))
}

/// `L_cst` with fresh draws of `X_t` and Gumbel noise.
pub fn loss_cst(
    model: &IcdcModel,
    instance: &Instance,
    x0: &SolutionMatrix,
    t: usize,
    sched: &NoiseSchedule,
    tau: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let draw = CloningDraw::at(sched, x0, t, rng)?;
    let mut f = model.forward(NormMode::Batch);
    let feats = model.features(instance)?;
    let logits = f.logits(&feats, &draw.xt, t)?;
    let v = cst_term(&mut f.tape, logits, instance.family(), instance.shape(), &draw.gumbel, tau)?;
    Ok(f.tape.scalar(v))
}

/// First-order optimizer with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    steps: u32,
}

impl Adam {
    pub fn new(lr: f64, like: &[Matrix]) -> Self {
        let zeros = || like.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), steps: 0 }
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        self.steps += 1;
        let c1 = 1.0 - math::powf(self.beta1, self.steps as f64);
        let c2 = 1.0 - math::powf(self.beta2, self.steps as f64);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let iter = p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
            for ((p, &g), (m, v)) in iter {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / (math::sqrt(*v / c2) + self.eps);
            }
        }
    }
}

/// Where improvement and prior samples get their instances.
#[derive(Clone, Debug)]
pub enum InstanceSource {
    /// Fresh random instances of the configured family and size.
    Generate,
    /// Cycles through a fixed list.
    Fixed(Vec<Arc<Instance>>),
}

/// Outcome of one improvement step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RewardReport {
    pub mean_reward: f64,
    pub feasible_rate: f64,
    /// `−(1/N) Σ advantage · logprob`, the surrogate whose gradient was applied.
    pub surrogate: f64,
    pub buffer_len: usize,
}

/// One outer iteration: the averaged cloning report and the improvement report.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub cloning: LossReport,
    pub improvement: RewardReport,
}

/// Owns the model, optimizer, buffer and RNG of a training run.
pub struct Trainer {
    pub model: IcdcModel,
    pub cfg: TrainConfig,
    pub buffer: ReplayBuffer,
    adam: Adam,
    rng: Rng,
    source: InstanceSource,
    next_fixed: usize,
    iterations: usize,
}

impl Trainer {
    pub fn new(model: IcdcModel, cfg: TrainConfig, source: InstanceSource) -> Result<Self> {
        cfg.validate()?;
        if model.config().family != cfg.family {
            return Err(invalid!("model family does not match the training family"));
        }
        if let InstanceSource::Fixed(list) = &source {
            if list.is_empty() || list.iter().any(|i| i.family() != cfg.family) {
                return Err(invalid!("fixed instance list must be nonempty and of the training family"));
            }
        }
        let buffer = ReplayBuffer::with_weighting(cfg.buffer_capacity(), cfg.kappa, cfg.weighting)?;
        let adam = Adam::new(cfg.learning_rate, model.params().values());
        let rng = crate::rng_from_seed(cfg.seed);
        Ok(Self { model, cfg, buffer, adam, rng, source, next_fixed: 0, iterations: 0 })
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    fn next_instance(&mut self) -> Result<Arc<Instance>> {
        match &self.source {
            InstanceSource::Generate => {
                let seed = self.rng.gen::<u64>();
                Ok(Arc::new(generate(self.cfg.family, self.cfg.size, seed)?))
            }
            InstanceSource::Fixed(list) => {
                let inst = list[self.next_fixed % list.len()].clone();
                self.next_fixed += 1;
                Ok(inst)
            }
        }
    }

    /// Fills the buffer with `N / α` uniform feasible samples on fresh
    /// instances.
    pub fn seed_buffer(&mut self) -> Result<()> {
        let count = libm::ceil(self.cfg.samples as f64 / self.cfg.alpha) as usize;
        for _ in 0..count {
            let inst = self.next_instance()?;
            let x0 = feasible_prior_sample(&inst, &mut self.rng);
            self.buffer.push(inst, x0);
        }
        Ok(())
    }

    /// One minibatch gradient step on the cloning loss.
    pub fn cloning_step(&mut self) -> Result<LossReport> {
        let batch: Vec<BufferEntry> = self.buffer.sample(self.cfg.batch_size, &mut self.rng)?.into_iter().cloned().collect();
        let mut grads = self.model.params().zeros_like();
        let mut report = LossReport::default();
        let mut stats = Vec::new();
        let k = 1.0 / batch.len() as f64;
        for entry in &batch {
            let sched = self.model.config().schedule_for_instance(&entry.instance)?;
            let draw = CloningDraw::sample(&sched, &entry.x0, &mut self.rng)?;
            let mut f = self.model.forward(NormMode::Batch);
            let (loss, r) = cloning_loss(
                &mut f,
                &entry.instance,
                &entry.x0,
                &draw,
                &sched,
                self.cfg.lambda_prd,
                self.cfg.lambda_cst,
                self.cfg.tau,
            )?;
            f.accumulate_grads(loss, k, &mut grads);
            stats.append(&mut f.batch_stats);
            report.add_scaled(&r, k);
        }
        self.adam.step(self.model.params_mut().values_mut(), &grads);
        self.model.update_running(&stats);
        Ok(report)
    }

    /// REINFORCE step on `N` generations with a mean baseline, then stores
    /// the generations and `⌈(1 − α)/α · N⌉` prior samples, spread over the
    /// same instances, in the buffer.
    pub fn improvement_step(&mut self) -> Result<RewardReport> {
        let n = self.cfg.samples;
        let per = self.cfg.rollouts_per_instance;
        let mut gens = Vec::with_capacity(n);
        let mut instances = Vec::with_capacity(n / per);
        for _ in 0..n / per {
            let inst = self.next_instance()?;
            instances.push(inst.clone());
            let sched = self.model.config().schedule_for_instance(&inst)?;
            for _ in 0..per {
                let g = full_reverse_generate(&self.model, &inst, &sched, &mut self.rng, self.cfg.stride, DecodeMode::Sample)?;
                let r = reward(&inst, &g.result.solution);
                gens.push((inst.clone(), g, r));
            }
        }
        let feasible = gens.iter().filter(|(_, _, r)| r.is_feasible()).count();
        let scores: Vec<f64> = gens.iter().map(|(_, _, r)| r.score().unwrap_or(f64::NAN)).collect();
        if feasible != n {
            return Err(invalid!("feasible decoding produced an infeasible generation"));
        }
        let advantages = advantages(&scores, per);
        let mut grads = self.model.params().zeros_like();
        let mut surrogate = 0.0;
        for ((inst, g, _), &adv) in gens.iter().zip(&advantages) {
            if adv == 0.0 {
                continue;
            }
            let mut f = self.model.forward(NormMode::Batch);
            let feats = self.model.features(inst)?;
            let logits = f.logits(&feats, &g.final_xt, g.final_t)?;
            let lp = decode_logprob_var(&mut f.tape, logits, &g.result.choices, ChoiceScore::default());
            surrogate -= adv * f.tape.scalar(lp) / n as f64;
            f.accumulate_grads(lp, -adv / n as f64, &mut grads);
        }
        self.adam.step(self.model.params_mut().values_mut(), &grads);
        for (inst, g, _) in gens {
            self.buffer.push(inst, g.result.solution);
        }
        for k in 0..self.cfg.prior_per_improvement() {
            let inst = instances[k % instances.len()].clone();
            let x0 = feasible_prior_sample(&inst, &mut self.rng);
            self.buffer.push(inst, x0);
        }
        Ok(RewardReport {
            mean_reward: scores.iter().sum::<f64>() / n as f64,
            feasible_rate: feasible as f64 / n as f64,
            surrogate,
            buffer_len: self.buffer.len(),
        })
    }

    /// `M` cloning steps followed by one improvement step; seeds the buffer
    /// first if it is empty.
    pub fn iteration(&mut self) -> Result<IterationReport> {
        if self.buffer.is_empty() {
            self.seed_buffer()?;
        }
        self.adam.lr = self.cfg.learning_rate_at(self.iterations);
        let mut cloning = LossReport::default();
        let k = 1.0 / self.cfg.cloning_steps as f64;
        for _ in 0..self.cfg.cloning_steps {
            let r = self.cloning_step()?;
            cloning.add_scaled(&r, k);
        }
        let improvement = self.improvement_step()?;
        self.iterations += 1;
        Ok(IterationReport { iteration: self.iterations, cloning, improvement })
    }

    /// Runs `cfg.epochs` iterations, calling `hook` after each; the hook can
    /// stop the run early by returning `false`.
    pub fn run(&mut self, mut hook: impl FnMut(&IterationReport, &Trainer) -> bool) -> Result<()> {
        while self.iterations < self.cfg.epochs {
            let report = self.iteration()?;
            if !hook(&report, self) {
                break;
            }
        }
        Ok(())
    }
}

/// `R_i − mean(R)` over consecutive groups of `group` scores.
pub fn advantages(scores: &[f64], group: usize) -> Vec<f64> {
    let group = if group <= 1 { scores.len() } else { group };
    scores
        .chunks(group)
        .flat_map(|c| {
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            c.iter().map(move |r| r - mean)
        })
        .collect()
}
