//! Unconstrained and feasibility-enforced sampling of `X_0`.
//!
//! [`feasible_decode`] draws one solution element at a time from the model's
//! per-element probabilities, restricted to the choices that keep a feasible
//! completion reachable. PMSP picks a machine per job in index order; routing
//! problems build the tour from city 0, masking visited cities and forcing the
//! return edge last. Every choice is a renormalized categorical, so the summed
//! log-probabilities are the exact likelihood of the constrained process.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::diffusion::{sample_elements, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::math;
use crate::matrix::{Matrix, SolutionMatrix};
use crate::model::{IcdcModel, NormMode};
use crate::problems::{Family, Instance};
use crate::tape::{ChoiceGroup, Tape, Var};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecodeMode {
    #[default]
    Sample,
    Greedy,
}

/// How a candidate element is scored inside a masked choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ChoiceScore {
    /// `l₁ − l₀`: the masked softmax is then the element-wise product
    /// distribution conditioned on the constraint.
    #[default]
    LogOdds,
    /// `l₁` alone.
    OneLogit,
}

impl ChoiceScore {
    #[inline]
    fn of(self, l0: f64, l1: f64) -> f64 {
        match self {
            ChoiceScore::LogOdds => l1 - l0,
            ChoiceScore::OneLogit => l1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub solution: SolutionMatrix,
    /// Sum of the log-probabilities of the masked choices made.
    pub logprob: f64,
    pub feasible: bool,
    /// The choices in order; candidates are row-major element indices.
    pub choices: Vec<ChoiceGroup>,
}

/// Draws every element independently from the softmax of its two logits.
pub fn sample_x0(x0_logits: &Matrix, rows: usize, cols: usize, rng: &mut Rng) -> Result<SolutionMatrix> {
    if x0_logits.shape() != (rows * cols, 2) {
        return Err(invalid!("logits must be {}x2, got {:?}", rows * cols, x0_logits.shape()));
    }
    let mut probs = Matrix::zeros(rows * cols, 2);
    for (e, l) in x0_logits.iter_rows().enumerate() {
        probs.row_mut(e).copy_from_slice(&math::softmax2(l[0], l[1]));
    }
    Ok(sample_elements(&probs, rows, cols, rng))
}

/// Feasibility-enforced decoding with the default [`ChoiceScore`].
pub fn feasible_decode(instance: &Instance, x0_logits: &Matrix, rng: &mut Rng, mode: DecodeMode) -> Result<DecodeResult> {
    feasible_decode_with(instance, x0_logits, rng, mode, ChoiceScore::default())
}

pub fn feasible_decode_with(
    instance: &Instance,
    x0_logits: &Matrix,
    rng: &mut Rng,
    mode: DecodeMode,
    rule: ChoiceScore,
) -> Result<DecodeResult> {
    let (rows, cols) = instance.shape();
    if x0_logits.shape() != (rows * cols, 2) {
        return Err(invalid!("logits must be {}x2, got {:?}", rows * cols, x0_logits.shape()));
    }
    let scores: Vec<f64> = x0_logits.iter_rows().map(|l| rule.of(l[0], l[1])).collect();
    let mut solution = SolutionMatrix::zeros(rows, cols);
    let mut choices = Vec::new();
    let mut logprob = 0.0;
    let mut choose = |candidates: Vec<usize>, rng: &mut Rng| -> usize {
        assert!(!candidates.is_empty(), "masked decode left no candidate");
        let (chosen, lp) = pick(&scores, &candidates, mode, rng);
        logprob += lp;
        choices.push(ChoiceGroup { candidates, chosen });
        chosen
    };
    match instance.family() {
        Family::Pmsp => {
            for j in 0..rows {
                let e = choose((j * cols..(j + 1) * cols).collect(), rng);
                solution.bits_mut()[e] = true;
            }
        }
        Family::Atsp | Family::Nav => {
            let n = rows;
            let mut visited = vec![false; n];
            visited[0] = true;
            let mut city = 0;
            for step in 0..n {
                let candidates: Vec<usize> = if step + 1 == n {
                    vec![city * n]
                } else {
                    (0..n).filter(|&j| !visited[j]).map(|j| city * n + j).collect()
                };
                let e = choose(candidates, rng);
                solution.bits_mut()[e] = true;
                city = e % n;
                visited[city] = true;
            }
        }
    }
    Ok(DecodeResult { solution, logprob, feasible: true, choices })
}

/// Picks one candidate from the softmax of `scores[candidates]`; returns it
/// with its log-probability. Greedy ties go to the first (lowest) candidate.
fn pick(scores: &[f64], candidates: &[usize], mode: DecodeMode, rng: &mut Rng) -> (usize, f64) {
    let lse = math::logsumexp(candidates.iter().map(|&c| scores[c]));
    let chosen = match mode {
        DecodeMode::Greedy => {
            let mut best = candidates[0];
            for &c in &candidates[1..] {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            best
        }
        DecodeMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = *candidates.last().expect("nonempty");
            for &c in candidates {
                acc += math::exp(scores[c] - lse);
                if u < acc {
                    pick = c;
                    break;
                }
            }
            pick
        }
    };
    (chosen, scores[chosen] - lse)
}

/// Differentiable log-probability of recorded `choices` under `logits`
/// (`|A||B| × 2` on the tape).
pub fn decode_logprob_var(tape: &mut Tape, logits: Var, choices: &[ChoiceGroup], rule: ChoiceScore) -> Var {
    let one = tape.column(logits, 1);
    let scores = match rule {
        ChoiceScore::OneLogit => one,
        ChoiceScore::LogOdds => {
            let zero = tape.column(logits, 0);
            tape.sub(one, zero)
        }
    };
    tape.pick_log_softmax(scores, choices.to_vec())
}

/// Reverse-process sampling with stride `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub result: DecodeResult,
    /// Timestep and state whose logits fed the final decode.
    pub final_t: usize,
    pub final_xt: SolutionMatrix,
    pub denoiser_calls: usize,
}

/// Samples `X_T` from the prior, applies reverse steps `t → t − s` with the
/// denoiser's logits until `t ≤ s`, then decodes a feasible `X_0` from the
/// last logits.
pub fn full_reverse_generate(
    model: &IcdcModel,
    instance: &Instance,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    stride: usize,
    mode: DecodeMode,
) -> Result<Generation> {
    let horizon = sched.steps();
    if stride < 1 || stride > horizon {
        return Err(invalid!("stride {stride} outside [1, {horizon}]"));
    }
    if horizon != model.config().horizon {
        return Err(invalid!("schedule has {horizon} steps but the model was built for {}", model.config().horizon));
    }
    let (rows, cols) = instance.shape();
    let emb = model.embed(&model.features(instance)?, NormMode::Batch)?;
    let mut xt = sched.prior_sample(rows, cols, rng);
    let mut t = horizon;
    let mut calls = 0;
    loop {
        let logits = model.x0_logits(&emb, &xt, t, NormMode::Batch)?;
        calls += 1;
        if t <= stride {
            let result = feasible_decode(instance, &logits, rng, mode)?;
            return Ok(Generation { result, final_t: t, final_xt: xt, denoiser_calls: calls });
        }
        let probs = sched.reverse_step_dist(&logits, &xt, t, stride)?;
        xt = sample_elements(&probs, rows, cols, rng);
        t -= stride;
    }
}
