//! Central finite-difference checks of every tape op, the cloning losses and
//! the full encoder + denoiser.

use icdc_core::decoding::{decode_logprob_var, feasible_decode, ChoiceScore, DecodeMode};
use icdc_core::model::{IcdcModel, ModelConfig, NormMode};
use icdc_core::problems::{feasible_prior_sample, generate, Family, Instance};
use icdc_core::tape::{ChoiceGroup, Tape, Var};
use icdc_core::training::{cst_term, prd_term, vb_term, CloningDraw};
use icdc_core::{rng_from_seed, Matrix, SolutionMatrix};
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Relative error with a floor so that structurally zero gradients (for
/// example biases feeding straight into a batch norm) compare against
/// finite-difference rounding noise rather than against zero.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = rng_from_seed(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Checks `d/dx sum(f(x) ⊙ W)` for every input coordinate.
fn check(inputs: Vec<Matrix>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |vals: &[Matrix]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().enumerate().map(|(i, m)| tape.param(i, m.clone())).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).shape();
        let w = tape.constant(random(shape.0, shape.1, 99));
        let weighted = tape.mul(out, w);
        let loss = tape.sum_all(weighted);
        (tape, vars, loss)
    };
    let (tape, _, loss) = eval(&inputs);
    let grads = tape.backward(loss);
    let mut analytic: Vec<Matrix> = inputs.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    tape.accumulate_param_grads(&grads, 1.0, &mut analytic);
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].as_mut_slice()[k] += STEP;
            let mut minus = inputs.clone();
            minus[i].as_mut_slice()[k] -= STEP;
            let (tp, _, lp) = eval(&plus);
            let (tm, _, lm) = eval(&minus);
            let numeric = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * STEP);
            let a = analytic[i].as_slice()[k];
            assert!(rel_err(a, numeric) < TOL, "input {i} coord {k}: analytic {a} vs numeric {numeric}");
        }
    }
}

#[test]
fn products_and_shapes() {
    check(vec![random(3, 4, 1), random(4, 2, 2)], |t, v| t.matmul(v[0], v[1]));
    check(vec![random(3, 4, 3), random(5, 4, 4)], |t, v| t.matmul_t(v[0], v[1]));
    check(vec![random(3, 4, 5)], |t, v| t.transpose(v[0]));
    check(vec![random(2, 6, 6)], |t, v| t.reshape(v[0], 4, 3));
    check(vec![random(3, 2, 7)], |t, v| t.repeat_rows(v[0], 3));
    check(vec![random(3, 2, 8)], |t, v| t.tile_rows(v[0], 4));
    check(vec![random(6, 2, 9)], |t, v| t.sum_row_groups(v[0], 3));
    check(vec![random(6, 2, 10)], |t, v| t.sum_rows_strided(v[0], 3));
    check(vec![random(3, 2, 11), random(3, 1, 12)], |t, v| t.concat_cols(&[v[0], v[1], v[0]]));
    check(vec![random(3, 3, 13)], |t, v| t.column(v[0], 1));
}

#[test]
fn elementwise_and_broadcast() {
    check(vec![random(3, 4, 1), random(3, 4, 2)], |t, v| t.add(v[0], v[1]));
    check(vec![random(3, 4, 1), random(3, 4, 2)], |t, v| t.sub(v[0], v[1]));
    check(vec![random(3, 4, 1), random(3, 4, 2)], |t, v| t.mul(v[0], v[1]));
    check(vec![random(3, 4, 3), random(1, 4, 4)], |t, v| t.add_row(v[0], v[1]));
    check(vec![random(3, 4, 3), random(1, 4, 4)], |t, v| t.mul_row(v[0], v[1]));
    check(vec![random(3, 4, 5), random(3, 1, 6)], |t, v| t.add_col(v[0], v[1]));
    check(vec![random(3, 4, 5), random(3, 1, 6)], |t, v| t.mul_col(v[0], v[1]));
    check(vec![random(3, 4, 7)], |t, v| t.scale(v[0], -2.5));
    check(vec![random(3, 4, 7)], |t, v| t.add_scalar(v[0], 0.3));
    check(vec![random(3, 4, 8)], |t, v| t.relu(v[0]));
    check(vec![random(3, 4, 9)], |t, v| t.sigmoid(v[0]));
    check(vec![random(3, 4, 10)], |t, v| t.exp(v[0]));
    check(vec![random(3, 4, 11).map(|x| x.abs() + 0.2)], |t, v| t.ln(v[0]));
    check(vec![random(3, 4, 12)], |t, v| t.square(v[0]));
}

#[test]
fn reductions_and_normalizers() {
    check(vec![random(3, 4, 1)], |t, v| t.sum_all(v[0]));
    check(vec![random(3, 4, 2)], |t, v| t.row_sums(v[0]));
    check(vec![random(3, 4, 3)], |t, v| t.col_sums(v[0]));
    check(vec![random(3, 4, 4)], |t, v| t.softmax_rows(v[0]));
    check(vec![random(3, 4, 5)], |t, v| t.log_softmax_rows(v[0]));
    check(vec![random(5, 3, 6), random(1, 3, 7), random(1, 3, 8)], |t, v| t.batch_norm(v[0], v[1], v[2]).0);
    let groups = vec![
        ChoiceGroup { candidates: vec![0, 2, 3], chosen: 2 },
        ChoiceGroup { candidates: vec![1, 4], chosen: 1 },
        ChoiceGroup { candidates: vec![5], chosen: 5 },
    ];
    check(vec![random(6, 1, 9)], move |t, v| t.pick_log_softmax(v[0], groups.clone()));
}

fn tiny_model(family: Family, seed: u64) -> IcdcModel {
    let mut cfg = ModelConfig::new(family, 4, 2, 2, 10);
    cfg.max_items = 3;
    cfg.score_hidden = 3;
    IcdcModel::init(cfg, &mut rng_from_seed(seed)).unwrap()
}

/// FD over every model parameter of a scalar built by `loss`.
fn check_model(model: &IcdcModel, loss: impl Fn(&IcdcModel) -> (f64, Vec<Matrix>)) -> usize {
    let (_, analytic) = loss(model);
    let mut checked = 0;
    for (i, value) in model.params().values().iter().enumerate() {
        let name = model.params().names()[i].clone();
        for k in 0..value.len() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                let mut v = value.clone();
                v.as_mut_slice()[k] += delta;
                m.params_mut().set(&name, v).unwrap();
                loss(&m).0
            };
            let numeric = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
            let a = analytic[i].as_slice()[k];
            assert!(rel_err(a, numeric) < TOL, "{name}[{k}]: analytic {a} vs numeric {numeric}");
            checked += 1;
        }
    }
    checked
}

struct Case {
    instance: Instance,
    x0: SolutionMatrix,
    draw: CloningDraw,
}

fn case(family: Family, seed: u64) -> (IcdcModel, Case) {
    let model = tiny_model(family, seed);
    let instance = generate(family, (3, 3), seed).unwrap();
    let mut rng = rng_from_seed(seed + 100);
    let x0 = feasible_prior_sample(&instance, &mut rng);
    let sched = model.config().schedule_for_instance(&instance).unwrap();
    let draw = CloningDraw::at(&sched, &x0, 4, &mut rng).unwrap();
    (model, Case { instance, x0, draw })
}

fn loss_with(model: &IcdcModel, c: &Case, which: &str) -> (f64, Vec<Matrix>) {
    let sched = model.config().schedule_for_instance(&c.instance).unwrap();
    let mut f = model.forward(NormMode::Batch);
    let feats = model.features(&c.instance).unwrap();
    let logits = f.logits(&feats, &c.draw.xt, c.draw.t).unwrap();
    let loss = match which {
        "vb" => vb_term(&mut f.tape, logits, &c.x0, &c.draw.xt, c.draw.t, &sched).unwrap(),
        "prd" => prd_term(&mut f.tape, logits, &c.x0).unwrap(),
        "cst" => cst_term(&mut f.tape, logits, c.instance.family(), c.instance.shape(), &c.draw.gumbel, 0.7).unwrap(),
        _ => {
            let w = f.tape.constant(random(9, 2, 5));
            let m = f.tape.mul(logits, w);
            f.tape.sum_all(m)
        }
    };
    let mut grads = model.params().zeros_like();
    f.accumulate_grads(loss, 1.0, &mut grads);
    (f.tape.scalar(loss), grads)
}

#[test]
fn encoder_and_denoiser_parameters() {
    let (model, c) = case(Family::Atsp, 1);
    assert!(check_model(&model, |m| loss_with(m, &c, "raw")) > 500);
}

#[test]
fn cloning_losses_atsp() {
    let (model, c) = case(Family::Atsp, 2);
    for which in ["vb", "prd", "cst"] {
        check_model(&model, |m| loss_with(m, &c, which));
    }
}

#[test]
fn cloning_losses_pmsp_and_nav() {
    for family in [Family::Pmsp, Family::Nav] {
        let (model, c) = case(family, 3);
        for which in ["vb", "prd", "cst"] {
            check_model(&model, |m| loss_with(m, &c, which));
        }
    }
}

#[test]
fn decode_logprob_gradient() {
    let (model, c) = case(Family::Atsp, 4);
    let feats = model.features(&c.instance).unwrap();
    let emb = model.embed(&feats, NormMode::Batch).unwrap();
    let logits = model.x0_logits(&emb, &c.draw.xt, c.draw.t, NormMode::Batch).unwrap();
    let r = feasible_decode(&c.instance, &logits, &mut rng_from_seed(0), DecodeMode::Sample).unwrap();
    check_model(&model, |m| {
        let mut f = m.forward(NormMode::Batch);
        let l = f.logits(&feats, &c.draw.xt, c.draw.t).unwrap();
        let lp = decode_logprob_var(&mut f.tape, l, &r.choices, ChoiceScore::LogOdds);
        let mut grads = m.params().zeros_like();
        f.accumulate_grads(lp, 1.0, &mut grads);
        (f.tape.scalar(lp), grads)
    });
}
