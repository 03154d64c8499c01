use std::sync::Arc;

use icdc_core::decoding::{decode_logprob_var, feasible_decode, ChoiceScore, DecodeMode};
use icdc_core::diffusion::{NoiseSchedule, ScheduleKind};
use icdc_core::model::{IcdcModel, ModelConfig, NormMode};
use icdc_core::problems::{feasible_prior_sample, generate, objective, AtspInstance, Family, Instance};
use icdc_core::tape::Tape;
use icdc_core::training::{
    advantages, cloning_loss, cst_term, prd_term, vb_term, Adam, BufferWeighting, CloningDraw, InstanceSource,
    ReplayBuffer, TrainConfig, Trainer,
};
use icdc_core::{rng_from_seed, Error, Matrix, SolutionMatrix};

/// Upper 1% point of the chi-square distribution with 3 degrees of freedom.
const CHI2_3DF_P01: f64 = 11.345;

fn atsp(n: usize, seed: u64) -> Arc<Instance> {
    Arc::new(generate(Family::Atsp, (n, n), seed).unwrap())
}

fn atsp_with_dist(rows: &[[f64; 3]]) -> Arc<Instance> {
    Arc::new(Instance::Atsp(AtspInstance::new(Matrix::from_rows(rows).unwrap(), false).unwrap()))
}

#[test]
fn buffer_push_evicts_and_rejects() {
    let mut buf = ReplayBuffer::new(3, 1.0).unwrap();
    let inst = atsp(4, 0);
    buf.push(inst.clone(), SolutionMatrix::from_tour(&[0, 1, 2, 3]));
    assert_eq!(buf.len(), 1);
    for order in [[0, 2, 1, 3], [0, 3, 1, 2], [0, 1, 3, 2]] {
        buf.push(inst.clone(), SolutionMatrix::from_tour(&order));
    }
    assert_eq!(buf.len(), 3);
    let first = buf.entries().next().unwrap();
    assert_eq!(first.x0, SolutionMatrix::from_tour(&[0, 2, 1, 3]));
    buf.push(inst, SolutionMatrix::zeros(4, 4));
    assert_eq!((buf.len(), buf.rejected()), (3, 1));
}

#[test]
fn empty_buffer_is_unavailable() {
    let buf = ReplayBuffer::new(4, 1.0).unwrap();
    assert!(matches!(buf.sample(1, &mut rng_from_seed(0)), Err(Error::Unavailable(_))));
}

#[test]
fn single_entry_always_drawn() {
    let mut buf = ReplayBuffer::new(4, 1.0).unwrap();
    buf.push(atsp(3, 1), SolutionMatrix::from_tour(&[0, 2, 1]));
    let draws = buf.sample(100, &mut rng_from_seed(0)).unwrap();
    assert!(draws.iter().all(|e| e.x0 == SolutionMatrix::from_tour(&[0, 2, 1])));
}

#[test]
fn equal_rewards_sample_uniformly() {
    // every tour of a constant-distance instance has the same length
    let flat = atsp_with_dist(&[[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]]);
    for weighting in [BufferWeighting::Global, BufferWeighting::PerInstance] {
        let mut buf = ReplayBuffer::with_weighting(8, 1.0, weighting).unwrap();
        for k in 0..4 {
            let order = if k % 2 == 0 { [0, 1, 2] } else { [0, 2, 1] };
            let inst = if weighting == BufferWeighting::Global { flat.clone() } else { Arc::new((*flat).clone()) };
            buf.push(inst, SolutionMatrix::from_tour(&order));
        }
        let entries: Vec<*const _> = buf.entries().map(|e| e as *const _).collect();
        let mut counts = [0f64; 4];
        for e in buf.sample(10_000, &mut rng_from_seed(3)).unwrap() {
            counts[entries.iter().position(|&p| std::ptr::eq(p, e)).unwrap()] += 1.0;
        }
        let chi2: f64 = counts.iter().map(|c| (c - 2500.0).powi(2) / 2500.0).sum();
        assert!(chi2 < CHI2_3DF_P01, "{weighting:?}: chi2 {chi2}");
    }
}

#[test]
fn shifted_exponential_weights() {
    // tours 0→1→2→0 (length 3 + ln 3) and 0→2→1→0 (length 3)
    let l3 = 3f64.ln();
    let inst = atsp_with_dist(&[[0.0, 1.0 + l3, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]]);
    for weighting in [BufferWeighting::Global, BufferWeighting::PerInstance] {
        let mut buf = ReplayBuffer::with_weighting(4, 1.0, weighting).unwrap();
        buf.push(inst.clone(), SolutionMatrix::from_tour(&[0, 2, 1]));
        buf.push(inst.clone(), SolutionMatrix::from_tour(&[0, 1, 2]));
        let p = buf.probabilities();
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        let n: f64 = 10_000.0;
        let hits = buf
            .sample(n as usize, &mut rng_from_seed(11))
            .unwrap()
            .iter()
            .filter(|e| e.x0 == SolutionMatrix::from_tour(&[0, 2, 1]))
            .count() as f64;
        let sigma = (n * 0.75 * 0.25).sqrt();
        assert!((hits - 0.75 * n).abs() < 3.0 * sigma, "{weighting:?}: {hits}");
    }
}

#[test]
fn per_instance_groups_share_mass_equally() {
    let mut buf = ReplayBuffer::new(8, 1.0).unwrap();
    let a = atsp(3, 0);
    let b = atsp(3, 1);
    buf.push(a.clone(), SolutionMatrix::from_tour(&[0, 1, 2]));
    buf.push(a, SolutionMatrix::from_tour(&[0, 2, 1]));
    buf.push(b, SolutionMatrix::from_tour(&[0, 1, 2]));
    let p = buf.probabilities();
    assert!((p[0] + p[1] - 0.5).abs() < 1e-12);
    assert!((p[2] - 0.5).abs() < 1e-12);
}

fn logits_var(tape: &mut Tape, m: Matrix) -> icdc_core::tape::Var {
    tape.constant(m)
}

#[test]
fn vb_is_zero_for_point_mass_and_nonnegative_otherwise() {
    let sched = NoiseSchedule::new(10, [0.75, 0.25], ScheduleKind::Cosine).unwrap();
    let mut rng = rng_from_seed(0);
    let x0 = SolutionMatrix::from_tour(&[0, 2, 3, 1]);
    for t in 2..=10 {
        let xt = sched.forward_sample(&x0, t, &mut rng).unwrap();
        let exact = Matrix::from_fn(16, 2, |e, k| if x0.bits()[e] as usize == k { 60.0 } else { -60.0 });
        let mut tape = Tape::new();
        let l = logits_var(&mut tape, exact);
        let v = vb_term(&mut tape, l, &x0, &xt, t, &sched).unwrap();
        assert!(tape.scalar(v).abs() < 1e-10);
        let mut tape = Tape::new();
        let l = logits_var(&mut tape, Matrix::from_fn(16, 2, |e, k| ((e * 7 + k * 3) % 5) as f64 - 2.0));
        let v = vb_term(&mut tape, l, &x0, &xt, t, &sched).unwrap();
        assert!(tape.scalar(v) >= 0.0);
    }
}

#[test]
fn vb_single_element_by_hand() {
    let alphas = vec![0.9, 0.7, 0.4];
    let qbar = [0.8, 0.2];
    let sched = NoiseSchedule::from_alphas(alphas.clone(), qbar).unwrap();
    let (t, x0v, xtv) = (3usize, 1usize, 0usize);
    let x0 = SolutionMatrix::from_bits(1, 1, vec![x0v == 1]).unwrap();
    let xt = SolutionMatrix::from_bits(1, 1, vec![xtv == 1]).unwrap();
    let logits: [f64; 2] = [0.3, -0.4];
    // q(x_t | x_{t-1} = k) and q(x_{t-1} = k | x_0 = v)
    let step = |k: usize, x: usize| alphas[t - 1] * (k == x) as u8 as f64 + (1.0 - alphas[t - 1]) * qbar[x];
    let cum: f64 = alphas[..t - 1].iter().product();
    let prev = |v: usize, k: usize| cum * (v == k) as u8 as f64 + (1.0 - cum) * qbar[k];
    let q: Vec<f64> = (0..2).map(|k| step(k, xtv) * prev(x0v, k)).collect();
    let qz = q[0] + q[1];
    let z0 = logits[0].exp() + logits[1].exp();
    let p0 = [logits[0].exp() / z0, logits[1].exp() / z0];
    let p: Vec<f64> = (0..2).map(|k| step(k, xtv) * (prev(0, k) * p0[0] + prev(1, k) * p0[1])).collect();
    let pz = p[0] + p[1];
    let kl: f64 = (0..2).map(|k| q[k] / qz * ((q[k] / qz).ln() - (p[k] / pz).ln())).sum();
    let mut tape = Tape::new();
    let l = logits_var(&mut tape, Matrix::from_rows(&[logits]).unwrap());
    let v = vb_term(&mut tape, l, &x0, &xt, t, &sched).unwrap();
    assert!((tape.scalar(v) - kl).abs() < 1e-10);
}

#[test]
fn prd_uniform_logits() {
    let x0 = SolutionMatrix::from_tour(&[0, 1, 3, 2]);
    let mut tape = Tape::new();
    let l = logits_var(&mut tape, Matrix::zeros(16, 2));
    let v = prd_term(&mut tape, l, &x0).unwrap();
    assert!((tape.scalar(v) - 16.0 * 2f64.ln()).abs() < 1e-6);
}

#[test]
fn cst_extremes() {
    let n = 5;
    let zeros = Matrix::zeros(n * n, 2);
    let mut tape = Tape::new();
    let l = logits_var(&mut tape, Matrix::from_fn(n * n, 2, |_, k| if k == 0 { 10.0 } else { -10.0 }));
    let v = cst_term(&mut tape, l, Family::Atsp, (n, n), &zeros, 0.01).unwrap();
    assert!((tape.scalar(v) - 2.0 * n as f64).abs() < 1e-9);
    let x = SolutionMatrix::from_tour(&[0, 3, 1, 4, 2]);
    let mut tape = Tape::new();
    let l = logits_var(&mut tape, Matrix::from_fn(n * n, 2, |e, k| if x.bits()[e] as usize == k { 1.0 } else { -1.0 }));
    let v = cst_term(&mut tape, l, Family::Atsp, (n, n), &zeros, 0.01).unwrap();
    assert!(tape.scalar(v) < 1e-9);
    let mut tape = Tape::new();
    let l = logits_var(&mut tape, Matrix::from_fn(6, 2, |_, k| if k == 0 { 10.0 } else { -10.0 }));
    let v = cst_term(&mut tape, l, Family::Pmsp, (3, 2), &Matrix::zeros(6, 2), 0.01).unwrap();
    assert!((tape.scalar(v) - 3.0).abs() < 1e-9);
}

fn small_model(family: Family, seed: u64) -> IcdcModel {
    IcdcModel::init(ModelConfig::new(family, 8, 1, 2, 5), &mut rng_from_seed(seed)).unwrap()
}

#[test]
fn cloning_report_bookkeeping_and_descent() {
    let model = small_model(Family::Atsp, 0);
    let inst = generate(Family::Atsp, (5, 5), 3).unwrap();
    let mut rng = rng_from_seed(1);
    let x0 = feasible_prior_sample(&inst, &mut rng);
    let sched = model.config().schedule_for_instance(&inst).unwrap();
    let draw = CloningDraw::at(&sched, &x0, 3, &mut rng).unwrap();
    let (l1, l2) = (1e-3, 1e-6);
    let eval = |m: &IcdcModel| {
        let mut f = m.forward(NormMode::Batch);
        let (loss, report) = cloning_loss(&mut f, &inst, &x0, &draw, &sched, l1, l2, 1.0).unwrap();
        let mut g = m.params().zeros_like();
        f.accumulate_grads(loss, 1.0, &mut g);
        (report, g)
    };
    let (before, grads) = eval(&model);
    assert!((before.vb + l1 * before.prd + l2 * before.cst - before.total).abs() < 1e-8);
    assert!(before.vb >= 0.0 && before.prd >= 0.0 && before.cst >= 0.0);
    let mut stepped = model.clone();
    let mut adam = Adam::new(1e-4, model.params().values());
    adam.step(stepped.params_mut().values_mut(), &grads);
    let (after, _) = eval(&stepped);
    assert!(after.total < before.total, "{} !< {}", after.total, before.total);

    let mut f = model.forward(NormMode::Batch);
    let (_, pure) = cloning_loss(&mut f, &inst, &x0, &draw, &sched, 0.0, 0.0, 1.0).unwrap();
    assert_eq!(pure.total, pure.vb);
}

#[test]
fn cloning_at_t1_skips_vb() {
    let model = small_model(Family::Pmsp, 0);
    let inst = generate(Family::Pmsp, (4, 2), 0).unwrap();
    let mut rng = rng_from_seed(2);
    let x0 = feasible_prior_sample(&inst, &mut rng);
    let sched = model.config().schedule_for_instance(&inst).unwrap();
    let draw = CloningDraw::at(&sched, &x0, 1, &mut rng).unwrap();
    let mut f = model.forward(NormMode::Batch);
    let (_, r) = cloning_loss(&mut f, &inst, &x0, &draw, &sched, 1.0, 0.0, 1.0).unwrap();
    assert_eq!(r.vb, 0.0);
    assert_eq!(r.total, r.prd);
}

fn tiny_cfg(family: Family, size: (usize, usize)) -> TrainConfig {
    let mut cfg = TrainConfig::new(family, size);
    cfg.samples = 4;
    cfg.cloning_steps = 2;
    cfg.batch_size = 2;
    cfg.epochs = 2;
    cfg
}

#[test]
fn improvement_grows_buffer_by_generations_and_prior() {
    let mut cfg = tiny_cfg(Family::Atsp, (4, 4));
    cfg.alpha = 0.3;
    cfg.capacity = Some(1000);
    let mut tr = Trainer::new(small_model(Family::Atsp, 1), cfg.clone(), InstanceSource::Generate).unwrap();
    let r = tr.improvement_step().unwrap();
    let expect = 4 + ((0.7f64 / 0.3) * 4.0).ceil() as usize;
    assert_eq!(r.buffer_len, expect);
    assert_eq!(r.feasible_rate, 1.0);
}

#[test]
fn equal_rewards_leave_parameters_unchanged() {
    let flat = Arc::new(Instance::Atsp(AtspInstance::new(Matrix::from_fn(4, 4, |i, j| (i != j) as u8 as f64), false).unwrap()));
    let model = small_model(Family::Atsp, 2);
    let mut tr = Trainer::new(model.clone(), tiny_cfg(Family::Atsp, (4, 4)), InstanceSource::Fixed(vec![flat])).unwrap();
    tr.improvement_step().unwrap();
    assert_eq!(tr.model.params(), model.params());
}

#[test]
fn rejects_too_few_samples() {
    let mut cfg = tiny_cfg(Family::Atsp, (4, 4));
    cfg.samples = 1;
    assert!(matches!(
        Trainer::new(small_model(Family::Atsp, 0), cfg, InstanceSource::Generate),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn zero_epochs_keeps_initialization() {
    let mut cfg = tiny_cfg(Family::Pmsp, (4, 2));
    cfg.epochs = 0;
    let model = small_model(Family::Pmsp, 3);
    let mut tr = Trainer::new(model.clone(), cfg, InstanceSource::Generate).unwrap();
    tr.run(|_, _| true).unwrap();
    assert_eq!(tr.model.params(), model.params());
}

#[test]
fn identical_seeds_give_identical_runs() {
    let run = || {
        let mut tr = Trainer::new(small_model(Family::Pmsp, 4), tiny_cfg(Family::Pmsp, (4, 2)), InstanceSource::Generate).unwrap();
        let mut reports = Vec::new();
        tr.run(|r, _| {
            reports.push(r.clone());
            true
        })
        .unwrap();
        (reports, tr.model.params().clone())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.len(), 2);
}

#[test]
fn reinforce_matches_exact_gradient_on_two_cycles() {
    // Decoding from city 0 has one real choice, so E[R] depends on the
    // logits of edges (0,1) and (0,2) only.
    let inst = atsp_with_dist(&[[0.0, 1.0, 4.0], [2.0, 0.0, 1.0], [1.0, 3.0, 0.0]]);
    let logits = Matrix::from_rows(&[[0.0, 0.0], [0.4, 0.1], [-0.2, 0.5], [0.0, 0.3], [0.0, 0.0], [0.7, -0.1], [0.2, 0.2], [-0.5, 0.0], [0.0, 0.0]]).unwrap();
    let r = |order: [usize; 3]| -objective(&inst, &SolutionMatrix::from_tour(&order));
    let (r1, r2) = (r([0, 1, 2]), r([0, 2, 1]));
    let s1 = logits[(1, 1)] - logits[(1, 0)];
    let s2 = logits[(2, 1)] - logits[(2, 0)];
    let p = 1.0 / (1.0 + (s2 - s1).exp());
    // dE[R]/ds1 = p(1-p)(r1 - r2); s_e = l1 - l0
    let d = p * (1.0 - p) * (r1 - r2);
    let n = 8usize;
    let scale = (n as f64 - 1.0) / n as f64;
    let mut exact = Matrix::zeros(9, 2);
    for (e, sign) in [(1usize, 1.0), (2usize, -1.0)] {
        exact.row_mut(e).copy_from_slice(&[-scale * sign * d, scale * sign * d]);
    }
    // the estimator targets ∇(−E[R])
    exact.scale_assign(-1.0);

    let mut rng = rng_from_seed(5);
    let resamples = 100_000;
    let mut mean = Matrix::zeros(9, 2);
    for _ in 0..resamples {
        let decodes: Vec<_> = (0..n).map(|_| feasible_decode(&inst, &logits, &mut rng, DecodeMode::Sample).unwrap()).collect();
        let scores: Vec<f64> = decodes.iter().map(|d| -objective(&inst, &d.solution)).collect();
        for (dec, adv) in decodes.iter().zip(advantages(&scores, 1)) {
            if adv == 0.0 {
                continue;
            }
            let mut tape = Tape::new();
            let l = tape.param(0, logits.clone());
            let lp = decode_logprob_var(&mut tape, l, &dec.choices, ChoiceScore::LogOdds);
            let g = tape.backward(lp);
            let mut acc = [Matrix::zeros(9, 2)];
            tape.accumulate_param_grads(&g, -adv / (n * resamples) as f64, &mut acc);
            mean.add_assign(&acc[0]);
        }
    }
    for e in 0..9 {
        for k in 0..2 {
            let (m, x) = (mean[(e, k)], exact[(e, k)]);
            if x == 0.0 {
                assert!(m.abs() < 1e-12);
            } else {
                assert!(((m - x) / x).abs() < 0.05, "coord ({e},{k}): {m} vs {x}");
            }
        }
    }
}

#[test]
fn cosine_learning_rate_endpoints() {
    let mut cfg = TrainConfig::new(Family::Atsp, (4, 4));
    cfg.learning_rate = 1e-3;
    cfg.epochs = 10;
    assert_eq!(cfg.learning_rate_at(7), 1e-3);
    cfg.final_learning_rate = Some(1e-4);
    assert!((cfg.learning_rate_at(0) - 1e-3).abs() < 1e-15);
    assert!((cfg.learning_rate_at(5) - 5.5e-4).abs() < 1e-15);
    assert!((cfg.learning_rate_at(10) - 1e-4).abs() < 1e-15);
    assert!((cfg.learning_rate_at(99) - 1e-4).abs() < 1e-15);
    cfg.final_learning_rate = Some(0.0);
    assert!(cfg.validate().is_err());
}
