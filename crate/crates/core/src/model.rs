//! Instance-conditioned latent encoder and autoregressive attention decoder.
//!
//! The encoder maps node features through a linear projection and a stack of
//! attention layers (multi-head attention and a ReLU feed-forward block, each
//! with a skip connection followed by instance normalisation). The mean node
//! embedding feeds two single-hidden-layer heads producing the mean and
//! log-variance of a diagonal Gaussian over the latent `z`.
//!
//! The decoder builds a context from `z`, the previous node and either the
//! first node (TSP) or the remaining capacity (CVRP), attends once over the
//! node embeddings and scores every node with `omega * tanh(q·k / sqrt(d_k))`
//! before a masked softmax.
//!
//! Two evaluation paths exist. Everything on a [`Tape`] is differentiable and
//! is used for training and parameter updates; [`DecoderCache`] precomputes
//! every per-instance projection so that rollouts and enumeration run without
//! a tape. Tests pin the two paths to each other.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnum::{Array, AttentionVars, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::problems::{Infeasibility, ProblemInstance, ProblemKind, RouteState, Solution};
use crate::rng::{self, Purpose, Rng};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ProblemKind,
    /// Embedding width.
    pub d_h: usize,
    pub heads: usize,
    /// Encoder attention layers.
    pub layers: usize,
    /// Per-head key width; `d_h == heads * d_k`.
    pub d_k: usize,
    pub d_z: usize,
    pub ff_hidden: usize,
    pub head_hidden: usize,
    /// Logit clipping scale.
    pub omega: f64,
}

impl ModelConfig {
    /// Desk-scale configuration.
    pub fn desk(kind: ProblemKind) -> Self {
        ModelConfig {
            kind,
            d_h: 64,
            heads: 4,
            layers: 3,
            d_k: 16,
            d_z: 16,
            ff_hidden: 128,
            head_hidden: 64,
            omega: 10.0,
        }
    }

    /// Full-size configuration (8 heads, width 128, 6 layers, `d_z = 100`).
    pub fn full(kind: ProblemKind) -> Self {
        ModelConfig {
            kind,
            d_h: 128,
            heads: 8,
            layers: 6,
            d_k: 16,
            d_z: 100,
            ff_hidden: 512,
            head_hidden: 128,
            omega: 10.0,
        }
    }

    /// Tiny configuration for exhaustive checks.
    pub fn tiny(kind: ProblemKind, d_z: usize) -> Self {
        ModelConfig {
            kind,
            d_h: 8,
            heads: 2,
            layers: 1,
            d_k: 4,
            d_z,
            ff_hidden: 8,
            head_hidden: 6,
            omega: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_h != self.heads * self.d_k {
            return bad(format!(
                "d_h ({}) must equal heads ({}) * d_k ({})",
                self.d_h, self.heads, self.d_k
            ));
        }
        if self.d_z == 0 || self.ff_hidden == 0 || self.head_hidden == 0 {
            return bad("d_z, ff_hidden and head_hidden must be positive".into());
        }
        if !(self.omega > 0.0) {
            return bad(format!("omega must be positive, got {}", self.omega));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => 2,
            ProblemKind::Cvrp => 3,
        }
    }

    pub fn context_dim(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => self.d_z + 2 * self.d_h,
            ProblemKind::Cvrp => self.d_z + self.d_h + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    attn: [ParamId; 4],
    norm1: [ParamId; 2],
    ff: [ParamId; 4],
    norm2: [ParamId; 2],
}

#[derive(Debug, Clone, PartialEq)]
struct HeadIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Ids {
    w0: ParamId,
    b0: ParamId,
    depot: Option<ParamId>,
    layers: Vec<LayerIds>,
    mu: HeadIds,
    logvar: HeadIds,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    wkey: ParamId,
    prev_ph: Option<ParamId>,
    first_ph: Option<ParamId>,
}

/// Encoder (`enc.*`, φ) and decoder (`dec.*`, θ) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

fn uniform(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Array {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Array::new(rows, cols, data).expect("shape")
}

fn expect_id(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
}

impl Model {
    /// Fresh parameters, uniform in `±1/sqrt(fan_in)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Purpose::Init, 0, 0);
        let mut s = ParamStore::new();
        let c = &config;
        let mut lin = |s: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool| {
            let b = 1.0 / (fan_in as f64).sqrt();
            s.insert(format!("{name}.w"), uniform(&mut rng, fan_in, fan_out, b));
            if bias {
                s.insert(format!("{name}.b"), uniform(&mut rng, 1, fan_out, b));
            }
        };
        lin(&mut s, "enc.in", c.input_dim(), c.d_h, true);
        if c.kind == ProblemKind::Cvrp {
            lin(&mut s, "enc.depot", 1, c.d_h, false);
        }
        for l in 0..c.layers {
            for m in ["q", "k", "v", "o"] {
                lin(&mut s, &format!("enc.l{l}.w{m}"), c.d_h, c.d_h, false);
            }
            s.insert(format!("enc.l{l}.norm1.g"), Array::filled(1, c.d_h, 1.0));
            s.insert(format!("enc.l{l}.norm1.b"), Array::zeros(1, c.d_h));
            lin(&mut s, &format!("enc.l{l}.ff1"), c.d_h, c.ff_hidden, true);
            lin(&mut s, &format!("enc.l{l}.ff2"), c.ff_hidden, c.d_h, true);
            s.insert(format!("enc.l{l}.norm2.g"), Array::filled(1, c.d_h, 1.0));
            s.insert(format!("enc.l{l}.norm2.b"), Array::zeros(1, c.d_h));
        }
        for head in ["mu", "logvar"] {
            lin(&mut s, &format!("enc.{head}.1"), c.d_h, c.head_hidden, true);
            lin(&mut s, &format!("enc.{head}.2"), c.head_hidden, c.d_z, true);
        }
        lin(&mut s, "dec.wq", c.context_dim(), c.d_h, false);
        for m in ["wk", "wv", "wo", "wkey"] {
            lin(&mut s, &format!("dec.{m}"), c.d_h, c.d_h, false);
        }
        if c.kind == ProblemKind::Tsp {
            s.insert("dec.prev_ph", uniform(&mut rng, 1, c.d_h, 1.0));
            s.insert("dec.first_ph", uniform(&mut rng, 1, c.d_h, 1.0));
        }
        Self::from_params(config, s)
    }

    /// Wraps an existing parameter store, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let s = &params;
        let id = |n: &str| expect_id(s, n);
        let head = |h: &str| -> Result<HeadIds> {
            Ok(HeadIds {
                w1: id(&format!("enc.{h}.1.w"))?,
                b1: id(&format!("enc.{h}.1.b"))?,
                w2: id(&format!("enc.{h}.2.w"))?,
                b2: id(&format!("enc.{h}.2.b"))?,
            })
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |x: &str| id(&format!("enc.l{l}.{x}"));
            layers.push(LayerIds {
                attn: [p("wq.w")?, p("wk.w")?, p("wv.w")?, p("wo.w")?],
                norm1: [p("norm1.g")?, p("norm1.b")?],
                ff: [p("ff1.w")?, p("ff1.b")?, p("ff2.w")?, p("ff2.b")?],
                norm2: [p("norm2.g")?, p("norm2.b")?],
            });
        }
        let tsp = config.kind == ProblemKind::Tsp;
        let ids = Ids {
            w0: id("enc.in.w")?,
            b0: id("enc.in.b")?,
            depot: if tsp { None } else { Some(id("enc.depot.w")?) },
            layers,
            mu: head("mu")?,
            logvar: head("logvar")?,
            wq: id("dec.wq.w")?,
            wk: id("dec.wk.w")?,
            wv: id("dec.wv.w")?,
            wo: id("dec.wo.w")?,
            wkey: id("dec.wkey.w")?,
            prev_ph: if tsp { Some(id("dec.prev_ph")?) } else { None },
            first_ph: if tsp { Some(id("dec.first_ph")?) } else { None },
        };
        let model = Model {
            config,
            params,
            ids,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let s = &self.params;
        let want = |id: ParamId, shape: [usize; 2]| -> Result<()> {
            let got = s.get(id).shape();
            if got == shape {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "parameter `{}` has shape {got:?}, expected {shape:?}",
                    s.name(id)
                )))
            }
        };
        want(self.ids.w0, [c.input_dim(), c.d_h])?;
        want(self.ids.wq, [c.context_dim(), c.d_h])?;
        want(self.ids.mu.w2, [c.head_hidden, c.d_z])?;
        want(self.ids.logvar.w2, [c.head_hidden, c.d_z])?;
        for l in &self.ids.layers {
            want(l.ff[0], [c.d_h, c.ff_hidden])?;
        }
        Ok(())
    }

    pub fn is_decoder(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with("dec.")
    }

    pub fn is_encoder(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with("enc.")
    }

    /// Node features: `(x, y)` for TSP, `(x, y, d_i / D)` for CVRP.
    pub fn node_features(&self, instance: &ProblemInstance) -> Result<Array> {
        if instance.kind != self.config.kind {
            return Err(Error::Config(format!(
                "model built for {} cannot encode a {} instance",
                self.config.kind, instance.kind
            )));
        }
        let nodes = instance.node_count();
        let mut data = Vec::with_capacity(nodes * self.config.input_dim());
        for i in 0..nodes {
            data.extend_from_slice(&instance.coords[i]);
            if instance.kind == ProblemKind::Cvrp {
                data.push(instance.demands[i] / instance.capacity());
            }
        }
        Array::new(nodes, self.config.input_dim(), data)
    }

    /// Records the encoder on `tape`.
    pub fn encode_on(&self, tape: &mut Tape, instance: &ProblemInstance) -> Result<EncodedVars> {
        let c = &self.config;
        let s = &self.params;
        let x = tape.constant(self.node_features(instance)?);
        let w0 = tape.param(s, self.ids.w0);
        let b0 = tape.param(s, self.ids.b0);
        let mut h = tape.matmul(x, w0)?;
        h = tape.add_row(h, b0)?;
        if let Some(depot) = self.ids.depot {
            let mut flag = Array::zeros(instance.node_count(), 1);
            flag.data_mut()[0] = 1.0;
            let flag = tape.constant(flag);
            let d = tape.param(s, depot);
            let d = tape.matmul(flag, d)?;
            h = tape.add(h, d)?;
        }
        for l in &self.ids.layers {
            let w = AttentionVars {
                wq: tape.param(s, l.attn[0]),
                wk: tape.param(s, l.attn[1]),
                wv: tape.param(s, l.attn[2]),
                wo: tape.param(s, l.attn[3]),
            };
            let a = tape.multi_head_attention(h, h, &w, c.heads)?;
            let a = tape.add(h, a)?;
            let g1 = tape.param(s, l.norm1[0]);
            let b1 = tape.param(s, l.norm1[1]);
            let hh = tape.instance_norm(a, g1, b1)?;
            let f = self.dense(tape, hh, l.ff[0], l.ff[1])?;
            let f = tape.relu(f);
            let f = self.dense(tape, f, l.ff[2], l.ff[3])?;
            let f = tape.add(hh, f)?;
            let g2 = tape.param(s, l.norm2[0]);
            let b2 = tape.param(s, l.norm2[1]);
            h = tape.instance_norm(f, g2, b2)?;
        }
        let mean = tape.mean_rows(h);
        let mu = self.head(tape, mean, &self.ids.mu)?;
        let logvar = self.head(tape, mean, &self.ids.logvar)?;
        Ok(EncodedVars {
            nodes: h,
            mean,
            mu,
            logvar,
        })
    }

    fn dense(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = tape.param(&self.params, w);
        let b = tape.param(&self.params, b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn head(&self, tape: &mut Tape, x: Var, ids: &HeadIds) -> Result<Var> {
        let h = self.dense(tape, x, ids.w1, ids.b1)?;
        let h = tape.relu(h);
        self.dense(tape, h, ids.w2, ids.b2)
    }

    /// Value-only encoding.
    pub fn encode(&self, instance: &ProblemInstance) -> Result<Encoded> {
        let mut tape = Tape::new();
        let e = self.encode_on(&mut tape, instance)?;
        Ok(Encoded::from_tape(&tape, &e))
    }

    /// Per-instance decoder handles on `tape`, keyed on the node embeddings.
    pub fn decoder_on(&self, tape: &mut Tape, nodes: Var) -> Result<DecoderVars> {
        let s = &self.params;
        let wk = tape.param(s, self.ids.wk);
        let wv = tape.param(s, self.ids.wv);
        let wkey = tape.param(s, self.ids.wkey);
        Ok(DecoderVars {
            nodes,
            keys: tape.matmul(nodes, wk)?,
            values: tape.matmul(nodes, wv)?,
            logit_keys: tape.matmul(nodes, wkey)?,
            wq: tape.param(s, self.ids.wq),
            wo: tape.param(s, self.ids.wo),
            prev_ph: self.ids.prev_ph.map(|id| tape.param(s, id)),
            first_ph: self.ids.first_ph.map(|id| tape.param(s, id)),
        })
    }

    /// Step distribution on `tape` for the state `state`.
    pub fn step_probs_on(
        &self,
        tape: &mut Tape,
        dec: &DecoderVars,
        z: Var,
        instance: &ProblemInstance,
        state: &RouteState,
    ) -> Result<Var> {
        let c = &self.config;
        let ctx = match c.kind {
            ProblemKind::Tsp => {
                let (prev, first) = match (state.current(), state.first()) {
                    (Some(p), Some(f)) => (
                        tape.gather_rows(dec.nodes, &[p])?,
                        tape.gather_rows(dec.nodes, &[f])?,
                    ),
                    _ => (
                        dec.prev_ph.expect("tsp placeholder"),
                        dec.first_ph.expect("tsp placeholder"),
                    ),
                };
                tape.concat_cols(&[z, prev, first])?
            }
            ProblemKind::Cvrp => {
                let prev = tape.gather_rows(dec.nodes, &[state.current().unwrap_or(0)])?;
                let cap = tape.constant(Array::scalar(
                    state.remaining_capacity() / instance.capacity(),
                ));
                tape.concat_cols(&[z, prev, cap])?
            }
        };
        let q = tape.matmul(ctx, dec.wq)?;
        let a = tape.attend(q, dec.keys, dec.values, c.heads)?;
        let o = tape.matmul(a, dec.wo)?;
        let logits = tape.matmul_t(o, dec.logit_keys)?;
        let logits = tape.scale(logits, 1.0 / (c.d_k as f64).sqrt());
        let logits = tape.tanh(logits);
        let logits = tape.scale(logits, c.omega);
        let mask = state.mask(instance);
        if !mask.iter().any(|&m| m) {
            return Err(Infeasibility::Masked {
                node: 0,
                step: state.steps(),
            }
            .into());
        }
        tape.masked_softmax(logits, Some(&mask))
    }

    /// Teacher-forced `log p_θ(visits | x, z)` on `tape`.
    pub fn log_prob_on(
        &self,
        tape: &mut Tape,
        dec: &DecoderVars,
        z: Var,
        instance: &ProblemInstance,
        visits: &[usize],
    ) -> Result<Var> {
        crate::problems::validate(instance, visits)?;
        let mut state = RouteState::new(instance);
        let mut terms = Vec::with_capacity(visits.len());
        for &v in visits {
            let p = self.step_probs_on(tape, dec, z, instance, &state)?;
            let pv = tape.pick(p, 0, v)?;
            terms.push(tape.log(pv)?);
            state.step(instance, v)?;
        }
        let all = tape.concat_cols(&terms)?;
        Ok(tape.sum(all))
    }

    /// Gaussian prior log-density of the fixed point `z` on `tape`.
    pub fn prior_logdensity_on(
        &self,
        tape: &mut Tape,
        enc: &EncodedVars,
        z: &[f64],
    ) -> Result<Var> {
        let d = z.len();
        let zc = tape.constant(Array::row_vector(z.to_vec()));
        let diff = tape.sub(zc, enc.mu)?;
        let sq = tape.mul(diff, diff)?;
        let neg = tape.scale(enc.logvar, -1.0);
        let inv_var = tape.exp(neg);
        let quad = tape.mul(sq, inv_var)?;
        let quad = tape.sum(quad);
        let lv = tape.sum(enc.logvar);
        let both = tape.add(quad, lv)?;
        let half = tape.scale(both, -0.5);
        Ok(tape.add_scalar(half, -0.5 * d as f64 * LN_2PI))
    }

    /// Precomputed decoder for one encoded instance.
    pub fn decoder_cache(&self, encoded: &Encoded) -> Result<DecoderCache> {
        DecoderCache::new(self, &encoded.nodes)
    }
}

/// Encoder outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub nodes: Var,
    pub mean: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// Encoder outputs as values: node embeddings, their mean and the latent
/// Gaussian parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub nodes: Array,
    pub mean: Vec<f64>,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl Encoded {
    pub fn from_tape(tape: &Tape, e: &EncodedVars) -> Self {
        Encoded {
            nodes: tape.value(e.nodes).clone(),
            mean: tape.value(e.mean).data().to_vec(),
            mu: tape.value(e.mu).data().to_vec(),
            logvar: tape.value(e.logvar).data().to_vec(),
        }
    }

    pub fn prior_logdensity(&self, z: &[f64]) -> f64 {
        gaussian_logdensity(z, &self.mu, &self.logvar)
    }

    /// Reparameterised draw `mu + exp(logvar / 2) * eps`, `eps ~ N(0, I)`.
    pub fn sample(&self, rng: &mut Rng) -> LatentSample {
        let eps: Vec<f64> = (0..self.mu.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        sample_latent(&self.mu, &self.logvar, &eps)
    }
}

/// Decoder handles on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub nodes: Var,
    keys: Var,
    values: Var,
    logit_keys: Var,
    wq: Var,
    wo: Var,
    prev_ph: Option<Var>,
    first_ph: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub prior_logdensity: f64,
}

/// `Σ_j [-½ log 2π - ½ logvar_j - (z_j - mu_j)² / (2 exp(logvar_j))]`.
pub fn gaussian_logdensity(z: &[f64], mu: &[f64], logvar: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((z, m), lv)| -0.5 * LN_2PI - 0.5 * lv - 0.5 * (z - m).powi(2) * (-lv).exp())
        .sum()
}

pub fn sample_latent(mu: &[f64], logvar: &[f64], eps: &[f64]) -> LatentSample {
    let z: Vec<f64> = mu
        .iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    let prior_logdensity = gaussian_logdensity(&z, mu, logvar);
    LatentSample {
        z,
        prior_logdensity,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub solution: Solution,
    pub log_prob: f64,
    /// Sum of the Shannon entropies of the step distributions.
    pub entropy: f64,
}

/// Row-major `[rows, cols]` block of plain values.
#[derive(Debug, Clone, PartialEq)]
struct Block {
    cols: usize,
    data: Vec<f64>,
}

impl Block {
    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

fn rows_times(a: &Array, w: &Array, row_start: usize, row_len: usize) -> Block {
    // a: [n, row_len] times w[row_start..row_start + row_len, :]
    let cols = w.cols();
    let mut data = vec![0.0; a.rows() * cols];
    for i in 0..a.rows() {
        for p in 0..row_len {
            let av = a.get(i, p);
            for (o, wv) in data[i * cols..(i + 1) * cols]
                .iter_mut()
                .zip(w.row(row_start + p))
            {
                *o += av * wv;
            }
        }
    }
    Block { cols, data }
}

/// Decoder with every projection that does not depend on the step state
/// folded in ahead of time.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    kind: ProblemKind,
    nodes: usize,
    d_h: usize,
    heads: usize,
    d_z: usize,
    omega: f64,
    logit_scale: f64,
    wq_z: Block,
    prev_q: Block,
    first_q: Option<Block>,
    prev_ph_q: Option<Vec<f64>>,
    first_ph_q: Option<Vec<f64>>,
    cap_q: Option<Vec<f64>>,
    keys: Block,
    values: Block,
    /// `logit_keys · woᵀ`, so logits are a product with the raw attention
    /// output.
    logit_proj: Block,
}

impl DecoderCache {
    pub fn new(model: &Model, nodes: &Array) -> Result<Self> {
        let c = &model.config;
        let s = &model.params;
        let ids = &model.ids;
        if nodes.cols() != c.d_h {
            return Err(Error::shape(
                "decoder_cache",
                format!("embeddings of width {} for d_h {}", nodes.cols(), c.d_h),
            ));
        }
        let wq = s.get(ids.wq);
        let full = |w: ParamId| rows_times(nodes, s.get(w), 0, c.d_h);
        let eye_z = Array::new(
            c.d_z,
            c.d_z,
            (0..c.d_z * c.d_z)
                .map(|i| if i / c.d_z == i % c.d_z { 1.0 } else { 0.0 })
                .collect(),
        )?;
        let wq_z = rows_times(&eye_z, wq, 0, c.d_z);
        let prev_q = rows_times(nodes, wq, c.d_z, c.d_h);
        let ph = |id: Option<ParamId>, off: usize| {
            id.map(|id| rows_times(s.get(id), wq, off, c.d_h).data)
        };
        let (first_q, prev_ph_q, first_ph_q, cap_q) = match c.kind {
            ProblemKind::Tsp => (
                Some(rows_times(nodes, wq, c.d_z + c.d_h, c.d_h)),
                ph(ids.prev_ph, c.d_z),
                ph(ids.first_ph, c.d_z + c.d_h),
                None,
            ),
            ProblemKind::Cvrp => (None, None, None, Some(wq.row(c.d_z + c.d_h).to_vec())),
        };
        let logit_keys = full(ids.wkey);
        let wo = s.get(ids.wo);
        let n = nodes.rows();
        let mut proj = vec![0.0; n * c.d_h];
        for i in 0..n {
            let lk = logit_keys.row(i);
            for m in 0..c.d_h {
                proj[i * c.d_h + m] = wo.row(m).iter().zip(lk).map(|(a, b)| a * b).sum();
            }
        }
        Ok(DecoderCache {
            kind: c.kind,
            nodes: n,
            d_h: c.d_h,
            heads: c.heads,
            d_z: c.d_z,
            omega: c.omega,
            logit_scale: 1.0 / (c.d_k as f64).sqrt(),
            wq_z,
            prev_q,
            first_q,
            prev_ph_q,
            first_ph_q,
            cap_q,
            keys: full(ids.wk),
            values: full(ids.wv),
            logit_proj: Block {
                cols: c.d_h,
                data: proj,
            },
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    /// The latent's contribution to the query, shared by every step.
    pub fn latent_query(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d_z {
            return Err(Error::shape(
                "latent_query",
                format!("latent of length {} for d_z {}", z.len(), self.d_z),
            ));
        }
        let mut q = vec![0.0; self.d_h];
        for (j, zj) in z.iter().enumerate() {
            for (o, w) in q.iter_mut().zip(self.wq_z.row(j)) {
                *o += zj * w;
            }
        }
        Ok(q)
    }

    /// Writes the step distribution for `state` into `probs` and returns the
    /// mask used. Masked entries are exactly zero.
    pub fn step_probs(
        &self,
        latent_q: &[f64],
        instance: &ProblemInstance,
        state: &RouteState,
        probs: &mut [f64],
        mask: &mut [bool],
    ) -> Result<()> {
        state.mask_into(instance, mask);
        if !mask.iter().any(|&m| m) {
            return Err(Infeasibility::Masked {
                node: 0,
                step: state.steps(),
            }
            .into());
        }
        let d = self.d_h;
        let mut q = latent_q.to_vec();
        let add = |q: &mut [f64], r: &[f64]| q.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        match self.kind {
            ProblemKind::Tsp => match (state.current(), state.first()) {
                (Some(p), Some(f)) => {
                    add(&mut q, self.prev_q.row(p));
                    add(&mut q, self.first_q.as_ref().expect("tsp").row(f));
                }
                _ => {
                    add(&mut q, self.prev_ph_q.as_ref().expect("tsp"));
                    add(&mut q, self.first_ph_q.as_ref().expect("tsp"));
                }
            },
            ProblemKind::Cvrp => {
                add(&mut q, self.prev_q.row(state.current().unwrap_or(0)));
                let cap = state.remaining_capacity() / instance.capacity();
                for (a, w) in q.iter_mut().zip(self.cap_q.as_ref().expect("cvrp")) {
                    *a += cap * w;
                }
            }
        }
        let dk = d / self.heads;
        let inv = 1.0 / (dk as f64).sqrt();
        let mut att = vec![0.0; d];
        let mut scores = vec![0.0; self.nodes];
        for h in 0..self.heads {
            let cols = h * dk..(h + 1) * dk;
            let qh = &q[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for (i, s) in scores.iter_mut().enumerate() {
                let kh = &self.keys.row(i)[cols.clone()];
                *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * inv;
                max = max.max(*s);
            }
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let out = &mut att[cols.clone()];
            for (i, s) in scores.iter().enumerate() {
                let w = s / total;
                for (o, v) in out.iter_mut().zip(&self.values.row(i)[cols.clone()]) {
                    *o += w * v;
                }
            }
        }
        let mut max = f64::NEG_INFINITY;
        for i in 0..self.nodes {
            if mask[i] {
                let raw: f64 = att
                    .iter()
                    .zip(self.logit_proj.row(i))
                    .map(|(a, b)| a * b)
                    .sum();
                let l = self.omega * (raw * self.logit_scale).tanh();
                probs[i] = l;
                max = max.max(l);
            }
        }
        let mut total = 0.0;
        for i in 0..self.nodes {
            if mask[i] {
                let e = (probs[i] - max).exp();
                probs[i] = e;
                total += e;
            } else {
                probs[i] = 0.0;
            }
        }
        for p in probs.iter_mut() {
            *p /= total;
        }
        Ok(())
    }

    /// Convenience wrapper returning a fresh probability vector.
    pub fn decode_step(
        &self,
        latent_q: &[f64],
        instance: &ProblemInstance,
        state: &RouteState,
    ) -> Result<Vec<f64>> {
        let mut p = vec![0.0; self.nodes];
        let mut m = vec![false; self.nodes];
        self.step_probs(latent_q, instance, state, &mut p, &mut m)?;
        Ok(p)
    }

    fn step_cap(instance: &ProblemInstance) -> usize {
        match instance.kind {
            ProblemKind::Tsp => instance.n,
            ProblemKind::Cvrp => 2 * instance.n + 2,
        }
    }

    /// Builds a full solution step by step, sampling or taking the argmax.
    pub fn rollout(
        &self,
        z: &[f64],
        instance: &ProblemInstance,
        rng: &mut Rng,
        mode: DecodeMode,
    ) -> Result<Rollout> {
        let lq = self.latent_query(z)?;
        let mut state = RouteState::new(instance);
        let mut probs = vec![0.0; self.nodes];
        let mut mask = vec![false; self.nodes];
        let cap = Self::step_cap(instance);
        let mut visits = Vec::with_capacity(cap);
        let mut log_prob = 0.0;
        let mut entropy = 0.0;
        while !state.is_complete() {
            if visits.len() >= cap {
                return Err(Error::Rollout(format!("step cap {cap} exceeded")));
            }
            self.step_probs(&lq, instance, &state, &mut probs, &mut mask)?;
            entropy -= probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
            let choice = match mode {
                DecodeMode::Greedy => argmax(&probs, &mask),
                DecodeMode::Sample => sample_index(&probs, &mask, rng.gen::<f64>()),
            };
            log_prob += probs[choice].ln();
            state.step(instance, choice)?;
            visits.push(choice);
        }
        let solution = Solution {
            cost: crate::problems::route_length(instance, &visits),
            visits,
        };
        Ok(Rollout {
            solution,
            log_prob,
            entropy,
        })
    }

    /// Value-only teacher-forced log-probability.
    pub fn log_prob(&self, z: &[f64], instance: &ProblemInstance, visits: &[usize]) -> Result<f64> {
        crate::problems::validate(instance, visits)?;
        let lq = self.latent_query(z)?;
        let mut state = RouteState::new(instance);
        let mut probs = vec![0.0; self.nodes];
        let mut mask = vec![false; self.nodes];
        let mut total = 0.0;
        for &v in visits {
            self.step_probs(&lq, instance, &state, &mut probs, &mut mask)?;
            total += probs[v].ln();
            state.step(instance, v)?;
        }
        Ok(total)
    }
}

/// First index of the largest admissible probability.
pub fn argmax(probs: &[f64], mask: &[bool]) -> usize {
    let mut best = usize::MAX;
    for i in 0..probs.len() {
        if mask[i] && (best == usize::MAX || probs[i] > probs[best]) {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw; `u` in `[0, 1)`.
pub fn sample_index(probs: &[f64], mask: &[bool], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = usize::MAX;
    for i in 0..probs.len() {
        if mask[i] && probs[i] > 0.0 {
            acc += probs[i];
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}
