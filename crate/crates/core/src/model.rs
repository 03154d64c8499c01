//! Problem encoder and denoiser realizing `f_θ(X_t, t, c)`.
//!
//! The encoder alternates dual attention blocks over the two item sets `A`
//! and `B`, using the relation matrices `D` to form attention scores. The
//! denoiser is an anisotropic GNN on the dense bipartite graph between `A` and
//! `B` whose edge features start from the noisy solution `X_t`; a final linear
//! layer turns each edge feature into two logits for `X_0`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{invalid, Result};
use crate::math;
use crate::matrix::{Matrix, SolutionMatrix};
use crate::problems::{qbar_for, Family, Instance, QbarMode};
use crate::tape::{BatchStats, Tape, Var, BN_EPS};
use crate::Rng;

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub family: Family,
    /// Embedding width `d`.
    pub d: usize,
    /// Encoder layers `L`.
    pub encoder_layers: usize,
    /// Denoiser layers `L′`.
    pub denoiser_layers: usize,
    /// Hidden width of the score MLP mapping `(S_inter S_intra, D)` to a scalar.
    pub score_hidden: usize,
    /// Width of the one-hot index features of `B` items (ATSP and PMSP).
    pub max_items: usize,
    /// Diffusion horizon `T` the denoiser is conditioned on.
    pub horizon: usize,
    pub schedule: ScheduleKind,
    pub qbar_mode: QbarMode,
}

impl ModelConfig {
    pub fn new(family: Family, d: usize, encoder_layers: usize, denoiser_layers: usize, horizon: usize) -> Self {
        Self {
            family,
            d,
            encoder_layers,
            denoiser_layers,
            score_hidden: 16,
            max_items: 64,
            horizon,
            schedule: ScheduleKind::Cosine,
            qbar_mode: QbarMode::ExactMarginal,
        }
    }

    /// Desk-scale defaults: `d = 32`, three encoder and three denoiser layers.
    pub fn desk(family: Family, horizon: usize) -> Self {
        Self::new(family, 32, 3, 3, horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.encoder_layers == 0 || self.denoiser_layers == 0 {
            return Err(invalid!("d, L and L' must all be >= 1"));
        }
        if self.horizon == 0 || self.score_hidden == 0 || self.max_items == 0 {
            return Err(invalid!("horizon, score_hidden and max_items must be >= 1"));
        }
        Ok(())
    }

    pub fn a_features(&self) -> usize {
        match self.family {
            Family::Nav => 2,
            _ => 1,
        }
    }

    pub fn b_features(&self) -> usize {
        match self.family {
            Family::Nav => 2,
            _ => self.max_items,
        }
    }

    pub fn relation_channels(&self) -> usize {
        match self.family {
            Family::Nav => 2,
            _ => 1,
        }
    }

    /// Noise schedule for an instance of shape `rows × cols`.
    pub fn schedule_for(&self, rows: usize, cols: usize) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.horizon, qbar_for(self.family, rows, cols, self.qbar_mode), self.schedule)
    }

    pub fn schedule_for_instance(&self, inst: &Instance) -> Result<NoiseSchedule> {
        let (r, c) = inst.shape();
        self.schedule_for(r, c)
    }
}

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    fn add(&mut self, name: String, value: Matrix) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Zero tensors shaped like the parameters.
    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect()
    }

    /// Replaces tensor `name`; its shape must match.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        if self.values[i].shape() != value.shape() {
            return Err(invalid!(
                "parameter {name} has shape {:?}, got {:?}",
                self.values[i].shape(),
                value.shape()
            ));
        }
        self.values[i] = value;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    slot: usize,
}

#[derive(Clone, Debug)]
struct SideParams {
    w_inter: ParamId,
    w_intra: ParamId,
    w_v: ParamId,
    score: Mlp,
    ff: Mlp,
    bn_attn: Norm,
    bn_ff: Norm,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    a: SideParams,
    b: SideParams,
}

/// Handles of the problem encoder's tensors.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    a_embed: Linear,
    b_embed: Linear,
    layers: Vec<EncoderLayer>,
}

#[derive(Clone, Debug)]
struct DenoiserLayer {
    u_a: ParamId,
    u_b: ParamId,
    v_a: ParamId,
    v_b: ParamId,
    p: ParamId,
    q: ParamId,
    r: ParamId,
    edge_mlp: Mlp,
    time_mlp: Mlp,
    bn_edge: Norm,
    bn_a: Norm,
    bn_b: Norm,
}

/// Handles of the denoiser's tensors.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    x_embed: ParamId,
    layers: Vec<DenoiserLayer>,
    out: Linear,
}

/// Running mean and variance of one batch-norm site.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// How batch normalization computes its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Statistics over the rows of the current forward pass.
    #[default]
    Batch,
    /// Running statistics accumulated during training.
    Running,
    /// Normalization disabled.
    Identity,
}

/// Encoder and denoiser weights with their configuration.
#[derive(Clone, Debug)]
pub struct IcdcModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: EncoderParams,
    denoiser: DenoiserParams,
    running: Vec<RunningStats>,
}

struct Builder<'r> {
    store: ParamStore,
    rng: &'r mut Rng,
    slots: usize,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
        let rng = &mut *self.rng;
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound));
        self.store.add(name, m)
    }

    fn linear(&mut self, name: &str, input: usize, output: usize, bias: bool) -> Linear {
        let w = self.uniform(format!("{name}.w"), input, output, input);
        let b = bias.then(|| self.uniform(format!("{name}.b"), 1, output, input));
        Linear { w, b }
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: usize, output: usize) -> Mlp {
        Mlp {
            hidden: self.linear(&format!("{name}.0"), input, hidden, true),
            out: self.linear(&format!("{name}.1"), hidden, output, true),
        }
    }

    fn square(&mut self, name: String, d: usize) -> ParamId {
        self.uniform(name, d, d, d)
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let gamma = self.store.add(format!("{name}.gamma"), Matrix::filled(1, d, 1.0));
        let beta = self.store.add(format!("{name}.beta"), Matrix::zeros(1, d));
        self.slots += 1;
        Norm { gamma, beta, slot: self.slots - 1 }
    }

    fn side(&mut self, name: &str, cfg: &ModelConfig) -> SideParams {
        let d = cfg.d;
        SideParams {
            w_inter: self.square(format!("{name}.w_inter"), d),
            w_intra: self.square(format!("{name}.w_intra"), d),
            w_v: self.square(format!("{name}.w_v"), d),
            score: self.mlp(&format!("{name}.score"), 1 + cfg.relation_channels(), cfg.score_hidden, 1),
            ff: self.mlp(&format!("{name}.ff"), d, d, d),
            bn_attn: self.norm(&format!("{name}.bn_attn"), d),
            bn_ff: self.norm(&format!("{name}.bn_ff"), d),
        }
    }
}

/// Raw item features and relation channels of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemFeatures {
    pub a: Matrix,
    pub b: Matrix,
    /// Relation channels, each `|A| × |B|`.
    pub relations: Vec<Matrix>,
}

impl ProblemFeatures {
    pub fn shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.rows())
    }
}

/// Encoder outputs `(A′, B′)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemEmbedding {
    pub a: Matrix,
    pub b: Matrix,
}

/// Tape handles of an embedding inside a [`Forward`] pass.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    pub a: Var,
    pub b: Var,
}

impl IcdcModel {
    /// Fresh parameters drawn from a symmetric scaled-uniform initializer.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut bld = Builder { store: ParamStore::default(), rng, slots: 0 };
        let a_embed = bld.linear("enc.embed_a", config.a_features(), d, true);
        let b_embed = if config.family == Family::Nav {
            a_embed
        } else {
            bld.linear("enc.embed_b", config.b_features(), d, true)
        };
        let layers = (0..config.encoder_layers)
            .map(|l| EncoderLayer { a: bld.side(&format!("enc.{l}.a"), &config), b: bld.side(&format!("enc.{l}.b"), &config) })
            .collect();
        let encoder = EncoderParams { a_embed, b_embed, layers };

        let x_embed = bld.uniform("den.embed_x".into(), 2, d, 1);
        let layers = (0..config.denoiser_layers)
            .map(|l| {
                let n = |s: &str| format!("den.{l}.{s}");
                DenoiserLayer {
                    u_a: bld.square(n("u_a"), d),
                    u_b: bld.square(n("u_b"), d),
                    v_a: bld.square(n("v_a"), d),
                    v_b: bld.square(n("v_b"), d),
                    p: bld.square(n("p"), d),
                    q: bld.square(n("q"), d),
                    r: bld.square(n("r"), d),
                    edge_mlp: bld.mlp(&n("edge_mlp"), d, d, d),
                    time_mlp: bld.mlp(&n("time_mlp"), d, d, d),
                    bn_edge: bld.norm(&n("bn_edge"), d),
                    bn_a: bld.norm(&n("bn_a"), d),
                    bn_b: bld.norm(&n("bn_b"), d),
                }
            })
            .collect();
        let out = bld.linear("den.out", d, 2, true);
        let denoiser = DenoiserParams { x_embed, layers, out };
        let running = (0..bld.slots).map(|_| RunningStats { mean: vec![0.0; d], var: vec![1.0; d] }).collect();
        Ok(Self { config, params: bld.store, encoder, denoiser, running })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn set_running_stats(&mut self, stats: Vec<RunningStats>) -> Result<()> {
        if stats.len() != self.running.len() || stats.iter().any(|s| s.mean.len() != self.config.d || s.var.len() != self.config.d) {
            return Err(invalid!("running statistics do not match the architecture"));
        }
        self.running = stats;
        Ok(())
    }

    /// Folds batch statistics from a training pass into the running averages.
    pub fn update_running(&mut self, stats: &[(usize, BatchStats)]) {
        for (slot, s) in stats {
            let r = &mut self.running[*slot];
            for (m, v) in r.mean.iter_mut().zip(&s.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * v;
            }
            for (m, v) in r.var.iter_mut().zip(&s.var) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * v;
            }
        }
    }

    /// Raw encoder inputs for `inst`.
    ///
    /// `A` items get a zero feature and `B` items a one-hot index for ATSP and
    /// PMSP; NAV cities on both sides carry their coordinates.
    pub fn features(&self, inst: &Instance) -> Result<ProblemFeatures> {
        if inst.family() != self.config.family {
            return Err(invalid!(
                "model trained for {} cannot encode a {} instance",
                self.config.family.name(),
                inst.family().name()
            ));
        }
        let (na, nb) = inst.shape();
        let relations = inst.relations().into_iter().cloned().collect();
        let (a, b) = match inst {
            Instance::Nav(v) => (v.coords.clone(), v.coords.clone()),
            _ => {
                if nb > self.config.max_items {
                    return Err(invalid!("{nb} B-items exceed the model's one-hot width {}", self.config.max_items));
                }
                (
                    Matrix::zeros(na, 1),
                    Matrix::from_fn(nb, self.config.max_items, |i, j| if i == j { 1.0 } else { 0.0 }),
                )
            }
        };
        Ok(ProblemFeatures { a, b, relations })
    }

    /// Starts a forward pass recording onto a fresh tape.
    pub fn forward(&self, mode: NormMode) -> Forward<'_> {
        Forward { model: self, tape: Tape::new(), leaves: vec![None; self.params.len()], mode, batch_stats: Vec::new() }
    }

    /// Problem embedding without gradient tracking.
    pub fn embed(&self, feats: &ProblemFeatures, mode: NormMode) -> Result<ProblemEmbedding> {
        let mut f = self.forward(mode);
        let e = f.encode(feats)?;
        Ok(ProblemEmbedding { a: f.tape.value(e.a).clone(), b: f.tape.value(e.b).clone() })
    }

    /// `X_0` logits (`|A||B| × 2`) for a precomputed embedding.
    pub fn x0_logits(&self, emb: &ProblemEmbedding, xt: &SolutionMatrix, t: usize, mode: NormMode) -> Result<Matrix> {
        let mut f = self.forward(mode);
        let a = f.tape.constant(emb.a.clone());
        let b = f.tape.constant(emb.b.clone());
        let out = f.denoise(EmbeddingVars { a, b }, xt, t)?;
        Ok(f.tape.value(out).clone())
    }
}

/// One recorded evaluation of the model.
pub struct Forward<'m> {
    model: &'m IcdcModel,
    pub tape: Tape,
    leaves: Vec<Option<Var>>,
    mode: NormMode,
    /// Batch statistics of every normalization site visited, by slot.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl<'m> Forward<'m> {
    pub fn model(&self) -> &'m IcdcModel {
        self.model
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let v = self.tape.param(id.0, self.model.params.get(id).clone());
        self.leaves[id.0] = Some(v);
        v
    }

    /// Gradient of scalar `loss` with respect to every parameter, scaled by
    /// `scale` and added to `out`.
    pub fn accumulate_grads(&self, loss: Var, scale: f64, out: &mut [Matrix]) {
        let g = self.tape.backward(loss);
        self.tape.accumulate_param_grads(&g, scale, out);
    }

    fn linear(&mut self, l: Linear, x: Var) -> Var {
        let w = self.param(l.w);
        let y = self.tape.matmul(x, w);
        match l.b {
            Some(b) => {
                let b = self.param(b);
                self.tape.add_row(y, b)
            }
            None => y,
        }
    }

    fn mlp(&mut self, m: Mlp, x: Var) -> Var {
        let h = self.linear(m.hidden, x);
        let h = self.tape.relu(h);
        self.linear(m.out, h)
    }

    fn norm(&mut self, n: Norm, x: Var) -> Var {
        match self.mode {
            NormMode::Identity => x,
            NormMode::Batch => {
                let g = self.param(n.gamma);
                let b = self.param(n.beta);
                let (y, stats) = self.tape.batch_norm(x, g, b);
                self.batch_stats.push((n.slot, stats));
                y
            }
            NormMode::Running => {
                let r = &self.model.running[n.slot];
                let c = r.mean.len();
                let neg_mean = self.tape.constant(Matrix::from_fn(1, c, |_, j| -r.mean[j]));
                let inv_std = self.tape.constant(Matrix::from_fn(1, c, |_, j| 1.0 / math::sqrt(r.var[j] + BN_EPS)));
                let g = self.param(n.gamma);
                let b = self.param(n.beta);
                let y = self.tape.add_row(x, neg_mean);
                let y = self.tape.mul_row(y, inv_std);
                let y = self.tape.mul_row(y, g);
                self.tape.add_row(y, b)
            }
        }
    }

    /// Embeds raw item features into `(A, B)` of width `d`.
    pub fn embed_inputs(&mut self, feats: &ProblemFeatures) -> Result<EmbeddingVars> {
        let cfg = &self.model.config;
        if feats.a.cols() != cfg.a_features() || feats.b.cols() != cfg.b_features() {
            return Err(invalid!("item feature widths do not match the model"));
        }
        let enc = self.model.encoder.clone();
        let a = self.tape.constant(feats.a.clone());
        let b = self.tape.constant(feats.b.clone());
        let a = self.linear(enc.a_embed, a);
        let b = self.linear(enc.b_embed, b);
        Ok(EmbeddingVars { a, b })
    }

    /// Full problem encoder: input embedding followed by `L` attention layers.
    pub fn encode(&mut self, feats: &ProblemFeatures) -> Result<EmbeddingVars> {
        let start = self.embed_inputs(feats)?;
        self.encode_from(start, &feats.relations)
    }

    /// Attention layers applied to given item embeddings.
    pub fn encode_from(&mut self, start: EmbeddingVars, relations: &[Matrix]) -> Result<EmbeddingVars> {
        let (na, nb) = (self.tape.value(start.a).rows(), self.tape.value(start.b).rows());
        let d = self.model.config.d;
        if self.tape.value(start.a).cols() != d || self.tape.value(start.b).cols() != d {
            return Err(invalid!("item embeddings must have width {d}"));
        }
        if relations.len() != self.model.config.relation_channels() || relations.iter().any(|r| r.shape() != (na, nb)) {
            return Err(invalid!("relation channels must be {} matrices of shape {na}x{nb}", self.model.config.relation_channels()));
        }
        let rel_a: Vec<Var> = relations
            .iter()
            .map(|r| self.tape.constant(Matrix::from_vec(na * nb, 1, r.as_slice().to_vec()).expect("shape")))
            .collect();
        let rel_b: Vec<Var> = relations
            .iter()
            .map(|r| self.tape.constant(Matrix::from_vec(na * nb, 1, r.transpose().into_vec()).expect("shape")))
            .collect();
        let layers = self.model.encoder.layers.clone();
        let (mut a, mut b) = (start.a, start.b);
        for layer in &layers {
            let a_next = self.attention_side(&layer.a, a, b, &rel_a);
            let b_next = self.attention_side(&layer.b, b, a, &rel_b);
            a = a_next;
            b = b_next;
        }
        Ok(EmbeddingVars { a, b })
    }

    fn attention_side(&mut self, p: &SideParams, x: Var, y: Var, rel: &[Var]) -> Var {
        let (nx, ny) = (self.tape.value(x).rows(), self.tape.value(y).rows());
        let w_inter = self.param(p.w_inter);
        let xw = self.tape.matmul(x, w_inter);
        let inter = self.tape.matmul_t(xw, x);
        let inter = self.tape.softmax_rows(inter);
        let w_intra = self.param(p.w_intra);
        let xw = self.tape.matmul(x, w_intra);
        let intra = self.tape.matmul_t(xw, y);
        let intra = self.tape.relu(intra);
        let mixed = self.tape.matmul(inter, intra);
        let flat = self.tape.reshape(mixed, nx * ny, 1);
        let mut cols = vec![flat];
        cols.extend_from_slice(rel);
        let stacked = self.tape.concat_cols(&cols);
        let score = self.mlp(p.score, stacked);
        let score = self.tape.reshape(score, nx, ny);
        let attn = self.tape.softmax_rows(score);
        let w_v = self.param(p.w_v);
        let values = self.tape.matmul(y, w_v);
        let tilde = self.tape.matmul(attn, values);
        let res = self.tape.add(x, tilde);
        let hat = self.norm(p.bn_attn, res);
        let ff = self.mlp(p.ff, hat);
        let res = self.tape.add(hat, ff);
        self.norm(p.bn_ff, res)
    }

    /// Denoiser: `X_0` logits (`|A||B| × 2`) given embeddings, `X_t` and `t`.
    pub fn denoise(&mut self, emb: EmbeddingVars, xt: &SolutionMatrix, t: usize) -> Result<Var> {
        let cfg = &self.model.config;
        let (d, horizon) = (cfg.d, cfg.horizon);
        if t < 1 || t > horizon {
            return Err(invalid!("timestep {t} outside [1, {horizon}]"));
        }
        let (na, nb) = (self.tape.value(emb.a).rows(), self.tape.value(emb.b).rows());
        if xt.shape() != (na, nb) {
            return Err(invalid!("X_t shape {:?} does not match embeddings {na}x{nb}", xt.shape()));
        }
        let den = self.model.denoiser.clone();
        let onehot = self.tape.constant(Matrix::from_fn(na * nb, 2, |e, k| (xt.bits()[e] as usize == k) as u8 as f64));
        let table = self.param(den.x_embed);
        let mut x = self.tape.matmul(onehot, table);
        let tfeat = self.tape.constant(timestep_features(t, d));
        let (mut ha, mut hb) = (emb.a, emb.b);
        for layer in &den.layers {
            let p = self.param(layer.p);
            let xp = self.tape.matmul(x, p);
            let q = self.param(layer.q);
            let hq = self.tape.matmul(ha, q);
            let hq = self.tape.repeat_rows(hq, nb);
            let r = self.param(layer.r);
            let hr = self.tape.matmul(hb, r);
            let hr = self.tape.tile_rows(hr, na);
            let xhat = self.tape.add(xp, hq);
            let xhat = self.tape.add(xhat, hr);
            let gate = self.tape.sigmoid(xhat);

            let v_b = self.param(layer.v_b);
            let vb = self.tape.matmul(hb, v_b);
            let vb = self.tape.tile_rows(vb, na);
            let msg_a = self.tape.mul(gate, vb);
            let msg_a = self.tape.sum_row_groups(msg_a, nb);
            let u_a = self.param(layer.u_a);
            let self_a = self.tape.matmul(ha, u_a);
            let upd_a = self.tape.add(self_a, msg_a);
            let upd_a = self.norm(layer.bn_a, upd_a);
            let upd_a = self.tape.relu(upd_a);

            let v_a = self.param(layer.v_a);
            let va = self.tape.matmul(ha, v_a);
            let va = self.tape.repeat_rows(va, nb);
            let msg_b = self.tape.mul(gate, va);
            let msg_b = self.tape.sum_rows_strided(msg_b, nb);
            let u_b = self.param(layer.u_b);
            let self_b = self.tape.matmul(hb, u_b);
            let upd_b = self.tape.add(self_b, msg_b);
            let upd_b = self.norm(layer.bn_b, upd_b);
            let upd_b = self.tape.relu(upd_b);

            let e = self.norm(layer.bn_edge, xhat);
            let e = self.mlp(layer.edge_mlp, e);
            let tm = self.mlp(layer.time_mlp, tfeat);
            let xn = self.tape.add(x, e);
            x = self.tape.add_row(xn, tm);
            ha = self.tape.add(ha, upd_a);
            hb = self.tape.add(hb, upd_b);
        }
        Ok(self.linear(den.out, x))
    }

    /// Encoder followed by the denoiser.
    pub fn logits(&mut self, feats: &ProblemFeatures, xt: &SolutionMatrix, t: usize) -> Result<Var> {
        let emb = self.encode(feats)?;
        self.denoise(emb, xt, t)
    }
}

/// Sinusoidal features of timestep `t` (`1 × d`).
pub fn timestep_features(t: usize, d: usize) -> Matrix {
    let half = d / 2;
    Matrix::from_fn(1, d, |_, k| {
        let i = if k < half { k } else { k - half };
        let freq = math::powf(10_000.0, -(i as f64) / half.max(1) as f64);
        let x = t as f64 * freq;
        if k < half {
            math::sin(x)
        } else {
            math::cos(x)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{generate, generate_tmat_atsp};
    use crate::rng_from_seed;

    fn atsp_model(d: usize, l: usize, lp: usize, seed: u64) -> IcdcModel {
        IcdcModel::init(ModelConfig::new(Family::Atsp, d, l, lp, 10), &mut rng_from_seed(seed)).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = atsp_model(8, 2, 2, 5);
        let b = atsp_model(8, 2, 2, 5);
        assert_eq!(a.params(), b.params());
        let c = atsp_model(8, 2, 2, 6);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn parameter_count_matches_architecture() {
        let m = atsp_model(8, 1, 1, 0);
        let (d, h, items) = (8usize, 16usize, 64usize);
        let linear = |i: usize, o: usize| i * o + o;
        let mlp = |i: usize, hid: usize, o: usize| linear(i, hid) + linear(hid, o);
        let side = 3 * d * d + mlp(2, h, 1) + mlp(d, d, d) + 2 * 2 * d;
        let encoder = linear(1, d) + linear(items, d) + 2 * side;
        let layer = 7 * d * d + 2 * mlp(d, d, d) + 3 * 2 * d;
        let denoiser = 2 * d + layer + linear(d, 2);
        assert_eq!(m.params().scalar_count(), encoder + denoiser);
    }

    #[test]
    fn output_shapes_and_finiteness() {
        for (l, lp) in [(1, 1), (2, 3)] {
            let m = atsp_model(8, l, lp, 1);
            let inst = Instance::Atsp(generate_tmat_atsp(8, 3).unwrap());
            let feats = m.features(&inst).unwrap();
            let emb = m.embed(&feats, NormMode::Batch).unwrap();
            assert_eq!(emb.a.shape(), (8, 8));
            assert_eq!(emb.b.shape(), (8, 8));
            let xt = SolutionMatrix::from_tour(&[0, 3, 1, 2, 7, 5, 6, 4]);
            let logits = m.x0_logits(&emb, &xt, 4, NormMode::Batch).unwrap();
            assert_eq!(logits.shape(), (64, 2));
            assert!(logits.all_finite());
        }
        let pm = IcdcModel::init(ModelConfig::new(Family::Pmsp, 8, 1, 1, 10), &mut rng_from_seed(0)).unwrap();
        let inst = generate(Family::Pmsp, (5, 3), 0).unwrap();
        let emb = pm.embed(&pm.features(&inst).unwrap(), NormMode::Batch).unwrap();
        assert_eq!((emb.a.rows(), emb.b.rows()), (5, 3));
        let logits = pm.x0_logits(&emb, &SolutionMatrix::zeros(5, 3), 1, NormMode::Batch).unwrap();
        assert_eq!(logits.shape(), (15, 2));
    }

    #[test]
    fn timestep_changes_logits() {
        let m = atsp_model(8, 1, 2, 2);
        let inst = Instance::Atsp(generate_tmat_atsp(5, 1).unwrap());
        let emb = m.embed(&m.features(&inst).unwrap(), NormMode::Batch).unwrap();
        let xt = SolutionMatrix::from_tour(&[0, 1, 2, 3, 4]);
        let a = m.x0_logits(&emb, &xt, 2, NormMode::Batch).unwrap();
        let b = m.x0_logits(&emb, &xt, 7, NormMode::Batch).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
        assert!(m.x0_logits(&emb, &xt, 0, NormMode::Batch).is_err());
        assert!(m.x0_logits(&emb, &xt, 11, NormMode::Batch).is_err());
    }

    fn zeroed(mut m: IcdcModel) -> IcdcModel {
        for v in m.params_mut().values_mut() {
            v.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        }
        m
    }

    #[test]
    fn zero_weights_keep_residual_path() {
        let m = zeroed(atsp_model(6, 2, 1, 3));
        let inst = Instance::Atsp(generate_tmat_atsp(4, 2).unwrap());
        let feats = m.features(&inst).unwrap();
        let mut f = m.forward(NormMode::Identity);
        let start_a = f.tape.constant(Matrix::from_fn(4, 6, |i, j| (i * 6 + j) as f64 * 0.1));
        let start_b = f.tape.constant(Matrix::from_fn(4, 6, |i, j| (i + j) as f64 * -0.2));
        let out = f.encode_from(EmbeddingVars { a: start_a, b: start_b }, &feats.relations).unwrap();
        assert_eq!(f.tape.value(out.a), f.tape.value(start_a));
        assert_eq!(f.tape.value(out.b), f.tape.value(start_b));
    }

    #[test]
    fn zero_weights_give_constant_output_bias() {
        let mut m = zeroed(atsp_model(6, 1, 2, 3));
        m.params_mut().set("den.out.b", Matrix::from_rows(&[[0.25, -1.5]]).unwrap()).unwrap();
        let inst = Instance::Atsp(generate_tmat_atsp(4, 2).unwrap());
        let emb = m.embed(&m.features(&inst).unwrap(), NormMode::Identity).unwrap();
        let logits = m.x0_logits(&emb, &SolutionMatrix::from_tour(&[0, 2, 1, 3]), 3, NormMode::Identity).unwrap();
        for row in logits.iter_rows() {
            assert_eq!(row, &[0.25, -1.5]);
        }
    }

    #[test]
    fn permuting_b_items_permutes_b_embedding() {
        let m = atsp_model(8, 2, 1, 4);
        let inst = Instance::Atsp(generate_tmat_atsp(5, 8).unwrap());
        let feats = m.features(&inst).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = ProblemFeatures {
            a: feats.a.clone(),
            b: Matrix::from_fn(5, feats.b.cols(), |i, j| feats.b[(perm[i], j)]),
            relations: vec![Matrix::from_fn(5, 5, |i, j| feats.relations[0][(i, perm[j])])],
        };
        let e0 = m.embed(&feats, NormMode::Batch).unwrap();
        let e1 = m.embed(&permuted, NormMode::Batch).unwrap();
        assert!(e0.a.max_abs_diff(&e1.a) < 1e-10);
        let expect_b = Matrix::from_fn(5, 8, |i, j| e0.b[(perm[i], j)]);
        assert!(expect_b.max_abs_diff(&e1.b) < 1e-10);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let m = atsp_model(4, 1, 1, 0);
        let pm = generate(Family::Pmsp, (3, 2), 0).unwrap();
        assert!(m.features(&pm).is_err());
        let inst = Instance::Atsp(generate_tmat_atsp(4, 0).unwrap());
        let emb = m.embed(&m.features(&inst).unwrap(), NormMode::Batch).unwrap();
        assert!(m.x0_logits(&emb, &SolutionMatrix::zeros(3, 4), 1, NormMode::Batch).is_err());
    }
}
