//! Categorical corruption of binary solution matrices.
//!
//! Each element is a 2-state variable corrupted independently by
//! `Q_t = α_t I + (1 − α_t) 𝟙 q̄ᵀ`. Because `𝟙 q̄ᵀ` is idempotent the
//! cumulative product collapses to `Q_{1:t} = ᾱ_t I + (1 − ᾱ_t) 𝟙 q̄ᵀ` with
//! `ᾱ_t = Π_{s ≤ t} α_s`, and every marginal, posterior and reverse step below
//! is evaluated in closed form.

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::math::{self, PROB_FLOOR};
use crate::matrix::{Matrix, SolutionMatrix};
use crate::Rng;

/// Lower clip applied to every per-step retention weight.
pub const MIN_ALPHA: f64 = 1e-3;

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

/// Row-stochastic 2×2 transition matrix, `m[from][to]`.
pub type TransitionMatrix = [[f64; 2]; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Cosine,
    /// `ᾱ_t = 1 − t / (T + 1)`.
    Linear,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(ScheduleKind::Cosine),
            "linear" => Some(ScheduleKind::Linear),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alphas: Vec<f64>,
    alpha_cum: Vec<f64>,
    qbar: [f64; 2],
}

impl NoiseSchedule {
    /// Builds a `T`-step schedule targeting the prior `qbar`.
    pub fn new(steps: usize, qbar: [f64; 2], kind: ScheduleKind) -> Result<Self> {
        if steps < 1 {
            return Err(invalid!("diffusion horizon must be >= 1"));
        }
        check_qbar(qbar)?;
        let target_cum: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let c = math::cos((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2);
                    c * c
                };
                let f0 = f(0.0);
                (0..=steps).map(|t| f(t as f64) / f0).collect()
            }
            ScheduleKind::Linear => (0..=steps).map(|t| 1.0 - t as f64 / (steps as f64 + 1.0)).collect(),
        };
        let alphas: Vec<f64> = (1..=steps)
            .map(|t| (target_cum[t] / target_cum[t - 1]).clamp(MIN_ALPHA, 1.0))
            .collect();
        Self::from_alphas(alphas, qbar).map(|mut s| {
            s.kind = kind;
            s
        })
    }

    /// Schedule with explicit per-step retention weights `α_1..α_T`.
    pub fn from_alphas(alphas: Vec<f64>, qbar: [f64; 2]) -> Result<Self> {
        if alphas.is_empty() {
            return Err(invalid!("diffusion horizon must be >= 1"));
        }
        check_qbar(qbar)?;
        if let Some(a) = alphas.iter().find(|&&a| !(0.0..=1.0).contains(&a)) {
            return Err(invalid!("retention weight {a} outside [0, 1]"));
        }
        let mut alpha_cum = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_cum.push(acc);
        }
        Ok(Self { kind: ScheduleKind::Cosine, alphas, alpha_cum, qbar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Diffusion horizon `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn qbar(&self) -> [f64; 2] {
        self.qbar
    }

    /// `α_t`, `1 ≤ t ≤ T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `β_t = 1 − α_t`.
    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha(t)
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_cum(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_cum[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(invalid!("timestep {t} outside [1, {}]", self.steps()));
        }
        Ok(())
    }

    /// One-step matrix `Q_t`.
    pub fn q_step_matrix(&self, t: usize) -> Result<TransitionMatrix> {
        self.check_t(t)?;
        Ok(mix(self.alpha(t), self.qbar))
    }

    /// Cumulative matrix `Q_{1:t}`.
    pub fn q_cum_matrix(&self, t: usize) -> Result<TransitionMatrix> {
        self.check_t(t)?;
        Ok(mix(self.alpha_cum(t), self.qbar))
    }

    /// Transition `q(X_to | X_from)` for `0 ≤ from ≤ to ≤ T`.
    pub fn q_span_matrix(&self, from: usize, to: usize) -> TransitionMatrix {
        debug_assert!(from <= to && to <= self.steps());
        let from_cum = self.alpha_cum(from).max(PROB_FLOOR);
        mix((self.alpha_cum(to) / from_cum).min(1.0), self.qbar)
    }

    /// Per-element `q(X_{t−1} | X_t, X_0)` for `2 ≤ t ≤ T`.
    pub fn posterior(&self, xt: &SolutionMatrix, x0: &SolutionMatrix, t: usize) -> Result<Matrix> {
        if t < 2 || t > self.steps() {
            return Err(invalid!("posterior needs 2 <= t <= {}, got {t}", self.steps()));
        }
        if xt.shape() != x0.shape() {
            return Err(invalid!("posterior operands differ in shape"));
        }
        let mut out = Matrix::zeros(xt.len(), 2);
        for (e, (&a, &b)) in xt.bits().iter().zip(x0.bits()).enumerate() {
            let p = self.posterior_element(a as usize, b as usize, t);
            out.row_mut(e).copy_from_slice(&p);
        }
        Ok(out)
    }

    /// `q(x_{t−1} | x_t, x_0)` for a single element.
    pub fn posterior_element(&self, xt: usize, x0: usize, t: usize) -> [f64; 2] {
        let step = mix(self.alpha(t), self.qbar);
        let prev = mix(self.alpha_cum(t - 1), self.qbar);
        let num = [step[0][xt] * prev[x0][0], step[1][xt] * prev[x0][1]];
        normalize2(num)
    }

    /// Coefficients `c[v][k] = q(x_t | x_{t−s} = k) · q(x_{t−s} = k | x_0 = v)`
    /// of the reverse step, so that `p(x_{t−s} = k) ∝ Σ_v c[v][k] · p(x_0 = v)`.
    pub fn reverse_coefficients(&self, xt: usize, t: usize, s: usize) -> [[f64; 2]; 2] {
        let span = self.q_span_matrix(t - s, t);
        let base = mix(self.alpha_cum(t - s), self.qbar);
        let mut c = [[0.0; 2]; 2];
        for (v, row) in c.iter_mut().enumerate() {
            for (k, ck) in row.iter_mut().enumerate() {
                *ck = span[k][xt] * base[v][k];
            }
        }
        c
    }

    /// Per-element `p(X_{t−s} | X_t) ∝ Σ_v q(X_{t−s}, X_t | X_0 = v) · p(X_0 = v)`
    /// with `p(X_0)` given by the softmax of `x0_logits` (`|A||B| × 2`).
    pub fn reverse_step_dist(&self, x0_logits: &Matrix, xt: &SolutionMatrix, t: usize, s: usize) -> Result<Matrix> {
        if s < 1 || s > t || t > self.steps() {
            return Err(invalid!("reverse step needs 1 <= s <= t <= {}, got s={s}, t={t}", self.steps()));
        }
        if x0_logits.shape() != (xt.len(), 2) {
            return Err(invalid!("logits must be {}x2", xt.len()));
        }
        let coeff = [self.reverse_coefficients(0, t, s), self.reverse_coefficients(1, t, s)];
        let mut out = Matrix::zeros(xt.len(), 2);
        for (e, &bit) in xt.bits().iter().enumerate() {
            let l = x0_logits.row(e);
            let p0 = math::softmax2(l[0], l[1]);
            let c = &coeff[bit as usize];
            let un = [c[0][0] * p0[0] + c[1][0] * p0[1], c[0][1] * p0[0] + c[1][1] * p0[1]];
            out.row_mut(e).copy_from_slice(&normalize2(un));
        }
        Ok(out)
    }

    /// Draws `X_t ~ q(X_t | X_0)`.
    pub fn forward_sample(&self, x0: &SolutionMatrix, t: usize, rng: &mut Rng) -> Result<SolutionMatrix> {
        let q = self.q_cum_matrix(t)?;
        let mut xt = x0.clone();
        for b in xt.bits_mut() {
            let p1 = q[*b as usize][1];
            *b = rng.gen::<f64>() < p1;
        }
        Ok(xt)
    }

    /// Draws every element independently from `q̄`.
    pub fn prior_sample(&self, rows: usize, cols: usize, rng: &mut Rng) -> SolutionMatrix {
        let mut x = SolutionMatrix::zeros(rows, cols);
        for b in x.bits_mut() {
            *b = rng.gen::<f64>() < self.qbar[1];
        }
        x
    }
}

fn check_qbar(q: [f64; 2]) -> Result<()> {
    if q.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (q[0] + q[1] - 1.0).abs() > 1e-9 {
        return Err(invalid!("prior {:?} is not a probability vector", q));
    }
    Ok(())
}

/// `a · I + (1 − a) · 𝟙 q̄ᵀ`.
#[inline]
pub fn mix(a: f64, qbar: [f64; 2]) -> TransitionMatrix {
    let b = 1.0 - a;
    [[a + b * qbar[0], b * qbar[1]], [b * qbar[0], a + b * qbar[1]]]
}

#[inline]
fn normalize2(p: [f64; 2]) -> [f64; 2] {
    let z = (p[0] + p[1]).max(PROB_FLOOR);
    [p[0] / z, p[1] / z]
}

/// Draws one element per row of a `n × 2` probability matrix.
pub fn sample_elements(probs: &Matrix, rows: usize, cols: usize, rng: &mut Rng) -> SolutionMatrix {
    let mut x = SolutionMatrix::zeros(rows, cols);
    for (e, b) in x.bits_mut().iter_mut().enumerate() {
        *b = rng.gen::<f64>() < probs[(e, 1)];
    }
    x
}

/// 2×2 matrix product.
pub fn matmul2(a: &TransitionMatrix, b: &TransitionMatrix) -> TransitionMatrix {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    fn max_diff(a: &TransitionMatrix, b: &TransitionMatrix) -> f64 {
        let mut m = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                m = m.max((a[i][j] - b[i][j]).abs());
            }
        }
        m
    }

    #[test]
    fn schedule_basics() {
        let s = NoiseSchedule::new(1, [0.5, 0.5], ScheduleKind::Cosine).unwrap();
        assert_eq!(s.alpha_cum(1), s.alpha(1));
        let s = NoiseSchedule::new(10, [0.9, 0.1], ScheduleKind::Cosine).unwrap();
        for t in 1..10 {
            assert!(s.alpha_cum(t + 1) < s.alpha_cum(t));
        }
        assert!(s.alpha_cum(10) < 0.05);
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = NoiseSchedule::new(37, [0.9, 0.1], kind).unwrap();
            let prod: f64 = s.alphas().iter().product();
            assert!((prod - s.alpha_cum(37)).abs() < 1e-10);
            assert!(s.alphas().iter().all(|&a| a > 0.0 && a <= 1.0));
        }
        assert!(NoiseSchedule::new(0, [0.5, 0.5], ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn step_matrix_examples() {
        let q = [0.95, 0.05];
        let s = NoiseSchedule::from_alphas(alloc::vec![1.0, 0.0, 0.5], q).unwrap();
        assert_eq!(s.q_step_matrix(1).unwrap(), [[1.0, 0.0], [0.0, 1.0]]);
        let full = s.q_step_matrix(2).unwrap();
        assert_eq!(full[0], q);
        assert_eq!(full[1], q);
        let half = s.q_step_matrix(3).unwrap();
        assert!(max_diff(&half, &[[0.975, 0.025], [0.475, 0.525]]) < 1e-15);
        assert!(s.q_step_matrix(0).is_err());
        assert!(s.q_step_matrix(4).is_err());
    }

    #[test]
    fn cumulative_matches_product() {
        let s = NoiseSchedule::new(50, [0.95, 0.05], ScheduleKind::Cosine).unwrap();
        assert_eq!(s.q_cum_matrix(1).unwrap(), s.q_step_matrix(1).unwrap());
        let mut prod = s.q_step_matrix(1).unwrap();
        for t in 2..=50 {
            prod = matmul2(&prod, &s.q_step_matrix(t).unwrap());
            assert!(max_diff(&prod, &s.q_cum_matrix(t).unwrap()) < 1e-10);
        }
        let last = s.q_cum_matrix(50).unwrap();
        assert!((last[0][1] - 0.05).abs() < 1e-3 && (last[1][1] - 0.05).abs() < 1e-3);
    }

    #[test]
    fn posterior_brute_force_single_element() {
        let s = NoiseSchedule::from_alphas(alloc::vec![0.7, 0.7], [0.5, 0.5]).unwrap();
        let (x0, xt) = (1usize, 0usize);
        // enumerate x1 and apply Bayes: p(x1 | x2, x0) ∝ q(x2 | x1) q(x1 | x0)
        let q1 = s.q_step_matrix(1).unwrap();
        let q2 = s.q_step_matrix(2).unwrap();
        let w = [q2[0][xt] * q1[x0][0], q2[1][xt] * q1[x0][1]];
        let z = w[0] + w[1];
        let got = s.posterior_element(xt, x0, 2);
        assert!((got[0] - w[0] / z).abs() < 1e-12);
        assert!((got[1] - w[1] / z).abs() < 1e-12);
    }

    #[test]
    fn posterior_deterministic_chain_is_point_mass() {
        let s = NoiseSchedule::from_alphas(alloc::vec![1.0; 4], [0.8, 0.2]).unwrap();
        let x0 = SolutionMatrix::from_bits(1, 2, alloc::vec![true, false]).unwrap();
        let post = s.posterior(&x0, &x0, 3).unwrap();
        assert_eq!(post.row(0), &[0.0, 1.0]);
        assert_eq!(post.row(1), &[1.0, 0.0]);
        assert!(s.posterior(&x0, &x0, 1).is_err());
    }

    #[test]
    fn forward_sample_identity_chain() {
        let s = NoiseSchedule::from_alphas(alloc::vec![1.0; 3], [0.5, 0.5]).unwrap();
        let x0 = SolutionMatrix::from_tour(&[0, 2, 1, 3]);
        let mut rng = rng_from_seed(1);
        assert_eq!(s.forward_sample(&x0, 3, &mut rng).unwrap(), x0);
    }

    #[test]
    fn reverse_point_mass_matches_posterior() {
        let s = NoiseSchedule::new(6, [0.75, 0.25], ScheduleKind::Cosine).unwrap();
        let x0 = SolutionMatrix::from_bits(2, 2, alloc::vec![true, false, false, true]).unwrap();
        let xt = SolutionMatrix::from_bits(2, 2, alloc::vec![true, true, false, false]).unwrap();
        let logits = Matrix::from_fn(4, 2, |e, k| if (k == 1) == x0.bits()[e] { 60.0 } else { -60.0 });
        let rev = s.reverse_step_dist(&logits, &xt, 4, 1).unwrap();
        let post = s.posterior(&xt, &x0, 4).unwrap();
        assert!(rev.max_abs_diff(&post) < 1e-12);
    }

    #[test]
    fn reverse_full_jump_weights_by_likelihood() {
        let s = NoiseSchedule::new(5, [0.8, 0.2], ScheduleKind::Cosine).unwrap();
        let logits = Matrix::from_rows(&[[0.3, -0.4]]).unwrap();
        let xt = SolutionMatrix::from_bits(1, 1, alloc::vec![true]).unwrap();
        let got = s.reverse_step_dist(&logits, &xt, 3, 3).unwrap();
        // hand computation: p(k) ∝ q(x_3 = 1 | x_0 = k) softmax(logits)_k
        let qc = s.q_cum_matrix(3).unwrap();
        let (e0, e1) = (math::exp(0.3), math::exp(-0.4));
        let w = [qc[0][1] * e0 / (e0 + e1), qc[1][1] * e1 / (e0 + e1)];
        assert!((got[(0, 0)] - w[0] / (w[0] + w[1])).abs() < 1e-12);
        assert!(s.reverse_step_dist(&logits, &xt, 3, 4).is_err());
    }
}
