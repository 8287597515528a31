//! Weighted, entropy-regularised REINFORCE.
//!
//! Each epoch draws `B` instances, encodes them, samples `K` latents per
//! instance by reparameterisation, decodes one solution per latent and takes
//! a single Adam step on the score-function surrogate
//!
//! ```text
//! (1/B) Σ_i Σ_k  a_ik [log p_θ(y_ik | x_i, z_ik) + log p_φ(z_ik | x_i)]
//!              - β ℓ_ik log p_θ(y_ik | x_i, z_ik)
//! ```
//!
//! with `a_ik = w_ik (C_ik - b_i)` and `ℓ_ik` the detached log-probability.
//! The weights `w` are a softmax of `-C / τ` over the instance's samples and
//! the baseline `b` is the mean sampled cost; both are constants for
//! differentiation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffnum::{Array, Gradients, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::model::{DecodeMode, Encoded, Model};
use crate::problems::{generate_instance, ProblemInstance, ProblemKind};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub latent_samples: usize,
    pub entropy_coef: f64,
    /// Initial weight temperature; `None` uses twice the mean sampled cost of
    /// the first epoch.
    pub tau0: Option<f64>,
    pub tau_decay: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Let the decoder's score term reach the shared encoder trunk.
    pub trunk_from_decoder: bool,
    /// Record wall-clock milliseconds in the trace (otherwise zero).
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            latent_samples: 8,
            entropy_coef: 0.01,
            tau0: None,
            tau_decay: 0.995,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-6,
            epochs: 300,
            seed: 0,
            trunk_from_decoder: true,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1");
        }
        if self.latent_samples == 0 {
            return fail("latent_samples", "must be >= 1");
        }
        if self.epochs == 0 {
            return fail("epochs", "must be >= 1");
        }
        if !(self.entropy_coef >= 0.0) {
            return fail("entropy_coef", "must be >= 0");
        }
        if let Some(t) = self.tau0 {
            if !(t > 0.0 && t.is_finite()) {
                return fail("tau0", "must be positive");
            }
        }
        if !(self.tau_decay > 0.0 && self.tau_decay <= 1.0) {
            return fail("tau_decay", "must lie in (0, 1]");
        }
        if !(self.lr >= 0.0) {
            return fail("lr", "must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1/beta2", "must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn tau(&self, tau0: f64, epoch: usize) -> f64 {
        tau0 * self.tau_decay.powi(epoch as i32)
    }
}

/// Normalised sample weights `softmax(-C / τ)`.
pub fn compute_weights(costs: &[f64], tau: f64) -> Vec<f64> {
    let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = costs.iter().map(|c| (-(c - min) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Latents, decoded solutions and costs drawn for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub instance: ProblemInstance,
    pub latents: Vec<Vec<f64>>,
    pub visits: Vec<Vec<usize>>,
    pub costs: Vec<f64>,
}

impl SampleSet {
    /// Mean cost, the baseline used during training.
    pub fn mean_cost(&self) -> f64 {
        self.costs.iter().sum::<f64>() / self.costs.len() as f64
    }
}

/// Per-instance weights and baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Weighting {
    pub weights: Vec<f64>,
    pub baseline: f64,
}

impl Weighting {
    pub fn for_samples(set: &SampleSet, tau: f64) -> Self {
        Weighting {
            weights: compute_weights(&set.costs, tau),
            baseline: set.mean_cost(),
        }
    }
}

/// Which terms of the surrogate to differentiate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorTerms {
    pub entropy_coef: f64,
    pub trunk_from_decoder: bool,
}

/// Gradient of the training surrogate for every parameter, averaged over the
/// `B` sample sets.
pub fn estimator_gradients(
    model: &Model,
    sets: &[SampleSet],
    weighting: &[Weighting],
    terms: EstimatorTerms,
) -> Result<Gradients> {
    if sets.len() != weighting.len() || sets.is_empty() {
        return Err(Error::Config(format!(
            "{} sample sets with {} weightings",
            sets.len(),
            weighting.len()
        )));
    }
    let mut total = Gradients::default();
    let inv_b = 1.0 / sets.len() as f64;
    for (set, w) in sets.iter().zip(weighting) {
        let mut tape = Tape::new();
        let enc = model.encode_on(&mut tape, &set.instance)?;
        let g = instance_gradient(model, &mut tape, &enc, set, w, terms)?;
        total.add_scaled(&g, inv_b);
    }
    Ok(total)
}

fn instance_gradient(
    model: &Model,
    tape: &mut Tape,
    enc: &crate::model::EncodedVars,
    set: &SampleSet,
    w: &Weighting,
    terms: EstimatorTerms,
) -> Result<Gradients> {
    let k = set.latents.len();
    if set.visits.len() != k || set.costs.len() != k || w.weights.len() != k {
        return Err(Error::Config(format!(
            "sample set with {k} latents, {} solutions, {} costs, {} weights",
            set.visits.len(),
            set.costs.len(),
            w.weights.len()
        )));
    }
    let nodes = if terms.trunk_from_decoder {
        enc.nodes
    } else {
        let v = tape.value(enc.nodes).clone();
        tape.constant(v)
    };
    let dec = model.decoder_on(tape, nodes)?;
    let mut parts = Vec::with_capacity(2 * k);
    for i in 0..k {
        let a = w.weights[i] * (set.costs[i] - w.baseline);
        let z = tape.constant(Array::row_vector(set.latents[i].clone()));
        let lp = model.log_prob_on(tape, &dec, z, &set.instance, &set.visits[i])?;
        let prior = model.prior_logdensity_on(tape, enc, &set.latents[i])?;
        let coef = a - terms.entropy_coef * tape.scalar(lp);
        parts.push(tape.scale(lp, coef));
        parts.push(tape.scale(prior, a));
    }
    let all = tape.concat_cols(&parts)?;
    let s = tape.sum(all);
    tape.gradient(s)
}

/// Decoder-parameter (θ) part of the estimator.
pub fn grad_theta(
    model: &Model,
    sets: &[SampleSet],
    weighting: &[Weighting],
    entropy_coef: f64,
) -> Result<Gradients> {
    let mut g = estimator_gradients(
        model,
        sets,
        weighting,
        EstimatorTerms {
            entropy_coef,
            trunk_from_decoder: false,
        },
    )?;
    g.retain(|id| model.is_decoder(id));
    Ok(g)
}

/// Encoder-parameter (φ) part of the estimator. With `trunk_from_decoder`
/// false this is exactly the weighted score of the latent prior.
pub fn grad_phi(
    model: &Model,
    sets: &[SampleSet],
    weighting: &[Weighting],
    terms: EstimatorTerms,
) -> Result<Gradients> {
    let mut g = estimator_gradients(model, sets, weighting, terms)?;
    g.retain(|id| model.is_encoder(id));
    Ok(g)
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, _, a)| vec![0.0; a.data().len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.iter() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for j in 0..p.len() {
                let gj = g.data()[j] + self.weight_decay * p[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p[j] -= self.lr * update;
            }
        }
    }
}

/// Where training instances come from.
#[derive(Debug, Clone)]
pub enum InstanceSource {
    Generator { kind: ProblemKind, n: usize },
    Dataset(Vec<ProblemInstance>),
}

impl InstanceSource {
    fn batch(&self, seed: u64, epoch: usize, size: usize) -> Result<Vec<ProblemInstance>> {
        match self {
            InstanceSource::Generator { kind, n } => (0..size)
                .map(|i| {
                    generate_instance(
                        *kind,
                        *n,
                        rng::derive(seed, Purpose::Batch, epoch as u64, i as u64),
                    )
                })
                .collect(),
            InstanceSource::Dataset(all) => {
                if all.is_empty() {
                    return Err(Error::Argument("empty training dataset".into()));
                }
                Ok((0..size)
                    .map(|i| {
                        let r = rng::derive(seed, Purpose::Batch, epoch as u64, i as u64);
                        all[(r % all.len() as u64) as usize].clone()
                    })
                    .collect())
            }
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub mean_cost: f64,
    pub greedy_cost: f64,
    pub mean_step_entropy: f64,
    pub tau: f64,
    pub wall_ms: u64,
}

/// Draws `K` latents and decoded solutions for one instance whose encoding
/// is already on `tape`.
pub fn draw_samples(
    model: &Model,
    encoded: &Encoded,
    instance: &ProblemInstance,
    k: usize,
    rng: &mut rng::Rng,
) -> Result<(SampleSet, f64, usize)> {
    let cache = model.decoder_cache(encoded)?;
    let mut set = SampleSet {
        instance: instance.clone(),
        latents: Vec::with_capacity(k),
        visits: Vec::with_capacity(k),
        costs: Vec::with_capacity(k),
    };
    let mut entropy = 0.0;
    let mut steps = 0;
    for _ in 0..k {
        let z = encoded.sample(rng).z;
        let r = cache.rollout(&z, instance, rng, DecodeMode::Sample)?;
        entropy += r.entropy;
        steps += r.solution.visits.len();
        set.latents.push(z);
        set.costs.push(r.solution.cost);
        set.visits.push(r.solution.visits);
    }
    Ok((set, entropy, steps))
}

/// Mean greedy cost at the latent mean over `instances`.
pub fn greedy_cost(model: &Model, instances: &[ProblemInstance]) -> Result<f64> {
    let mut total = 0.0;
    let mut rng = rng::stream(0, Purpose::Rollout, 0, 0);
    for inst in instances {
        let enc = model.encode(inst)?;
        let cache = model.decoder_cache(&enc)?;
        total += cache
            .rollout(&enc.mu, inst, &mut rng, DecodeMode::Greedy)?
            .solution
            .cost;
    }
    Ok(total / instances.len() as f64)
}

/// Runs `cfg.epochs` epochs starting at `start_epoch`. `on_epoch` sees the
/// model after each update.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    source: &InstanceSource,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&Model, &TrainRecord) -> Result<()>,
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let terms = EstimatorTerms {
        entropy_coef: cfg.entropy_coef,
        trunk_from_decoder: cfg.trunk_from_decoder,
    };
    let mut tau0 = cfg.tau0;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in start_epoch..start_epoch + cfg.epochs {
        let started = cfg.timing.then(Instant::now);
        let batch = source.batch(cfg.seed, epoch, cfg.batch_size)?;
        let mut sets = Vec::with_capacity(batch.len());
        let mut tapes = Vec::with_capacity(batch.len());
        let mut entropy = 0.0;
        let mut steps = 0;
        let mut greedy = 0.0;
        for (i, inst) in batch.iter().enumerate() {
            let mut tape = Tape::new();
            let enc_vars = model.encode_on(&mut tape, inst)?;
            let enc = Encoded::from_tape(&tape, &enc_vars);
            let mut r = rng::stream(cfg.seed, Purpose::Latent, epoch as u64, i as u64);
            let (set, h, s) = draw_samples(model, &enc, inst, cfg.latent_samples, &mut r)?;
            let cache = model.decoder_cache(&enc)?;
            greedy += cache
                .rollout(&enc.mu, inst, &mut r, DecodeMode::Greedy)?
                .solution
                .cost;
            entropy += h;
            steps += s;
            sets.push(set);
            tapes.push((tape, enc_vars));
        }
        let mean_cost = sets.iter().map(SampleSet::mean_cost).sum::<f64>() / sets.len() as f64;
        let t0 = *tau0.get_or_insert(2.0 * mean_cost);
        let tau = cfg.tau(t0, epoch);
        let inv_b = 1.0 / sets.len() as f64;
        let mut grads = Gradients::default();
        for (set, (mut tape, enc_vars)) in sets.iter().zip(tapes) {
            let w = Weighting::for_samples(set, tau);
            let g = instance_gradient(model, &mut tape, &enc_vars, set, &w, terms)?;
            grads.add_scaled(&g, inv_b);
        }
        if !grads.is_finite() {
            let bad = grads
                .iter()
                .find(|(_, g)| !g.is_finite())
                .map(|(id, _)| model.params.name(id).to_string())
                .unwrap_or_default();
            return Err(Error::NonFinite(format!(
                "gradient of `{bad}` at epoch {epoch}"
            )));
        }
        adam.step(&mut model.params, &grads);
        let record = TrainRecord {
            epoch,
            mean_cost,
            greedy_cost: greedy / batch.len() as f64,
            mean_step_entropy: entropy / steps as f64,
            tau,
            wall_ms: started.map_or(0, |s| s.elapsed().as_millis() as u64),
        };
        on_epoch(model, &record)?;
        trace.push(record);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn weights_closed_forms() {
        assert_eq!(compute_weights(&[3.0; 4], 0.7), vec![0.25; 4]);
        let w = compute_weights(&[1.0, 2.0], 1.0);
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
        let w = compute_weights(&[1.0, 5.0, 3.0], 1e9);
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-6));
        let shifted = compute_weights(&[101.0, 105.0, 103.0], 2.0);
        let base = compute_weights(&[1.0, 5.0, 3.0], 2.0);
        for (a, b) in shifted.iter().zip(&base) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(base[0] > base[2] && base[2] > base[1]);
        // Extreme costs must not underflow to 0/0.
        let w = compute_weights(&[1e4, 1e4 + 1.0], 1e-3);
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn config_errors_name_fields() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(m)) => assert!(m.contains("batch_size")),
            other => panic!("{other:?}"),
        }
        let cfg = TrainConfig {
            tau0: Some(-1.0),
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn tiny_sets(model: &Model, seed: u64, b: usize, k: usize) -> Vec<SampleSet> {
        (0..b)
            .map(|i| {
                let inst = generate_instance(ProblemKind::Tsp, 5, seed + i as u64).unwrap();
                let enc = model.encode(&inst).unwrap();
                let mut r = rng::stream(seed, Purpose::Latent, i as u64, 0);
                draw_samples(model, &enc, &inst, k, &mut r).unwrap().0
            })
            .collect()
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 1).unwrap();
        let sets = tiny_sets(&model, 3, 2, 3);
        let w: Vec<Weighting> = sets
            .iter()
            .map(|_| Weighting {
                weights: vec![1.0 / 3.0; 3],
                baseline: 0.0,
            })
            .collect();
        let mut flat = sets.clone();
        for s in &mut flat {
            s.costs = vec![0.0; 3];
        }
        let gt = grad_theta(&model, &flat, &w, 0.0).unwrap();
        assert_eq!(gt.max_abs(), 0.0);
        let terms = EstimatorTerms {
            entropy_coef: 0.0,
            trunk_from_decoder: true,
        };
        assert_eq!(grad_phi(&model, &flat, &w, terms).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn entropy_term_is_linear_in_beta() {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 2).unwrap();
        let sets = tiny_sets(&model, 5, 2, 3);
        let w: Vec<Weighting> = sets.iter().map(|s| Weighting::for_samples(s, 1.0)).collect();
        let g0 = grad_theta(&model, &sets, &w, 0.0).unwrap();
        let g1 = grad_theta(&model, &sets, &w, 0.1).unwrap();
        let g2 = grad_theta(&model, &sets, &w, 0.2).unwrap();
        for ((_, a), ((_, b), (_, c))) in g0.iter().zip(g1.iter().zip(g2.iter())) {
            for ((a, b), c) in a.data().iter().zip(b.data()).zip(c.data()) {
                let one = b - a;
                let two = c - a;
                assert!((two - 2.0 * one).abs() <= 1e-12 * (1.0 + two.abs()));
            }
        }
    }

    #[test]
    fn phi_gradient_is_invariant_to_joint_cost_shift() {
        let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 4).unwrap();
        let sets = tiny_sets(&model, 7, 2, 4);
        let terms = EstimatorTerms {
            entropy_coef: 0.0,
            trunk_from_decoder: false,
        };
        let w: Vec<Weighting> = sets.iter().map(|s| Weighting::for_samples(s, 0.5)).collect();
        let g = grad_phi(&model, &sets, &w, terms).unwrap();
        let mut shifted = sets.clone();
        for s in &mut shifted {
            s.costs.iter_mut().for_each(|c| *c += 5.0);
        }
        let ws: Vec<Weighting> = shifted.iter().map(|s| Weighting::for_samples(s, 0.5)).collect();
        let gs = grad_phi(&model, &shifted, &ws, terms).unwrap();
        for ((_, a), (_, b)) in g.iter().zip(gs.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 0).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            batch_size: 3,
            latent_samples: 2,
            epochs: 1,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let trace = train(
            &mut model,
            &cfg,
            &InstanceSource::Generator {
                kind: ProblemKind::Tsp,
                n: 5,
            },
            0,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(trace.len(), 1);
        for ((_, _, a), (_, _, b)) in model.params.iter().zip(before.params.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = TrainConfig {
            batch_size: 2,
            latent_samples: 3,
            epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let src = InstanceSource::Generator {
            kind: ProblemKind::Cvrp,
            n: 4,
        };
        let run = || {
            let mut m = Model::init(ModelConfig::tiny(ProblemKind::Cvrp, 2), 1).unwrap();
            let t = train(&mut m, &cfg, &src, 0, |_, _| Ok(())).unwrap();
            (m, t)
        };
        let (m1, t1) = run();
        let (m2, t2) = run();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
        assert!(t1.iter().all(|r| r.mean_cost.is_finite() && r.wall_ms == 0));
        let mut m3 = m1.clone();
        let resumed = train(&mut m3, &TrainConfig { epochs: 2, ..cfg.clone() }, &src, 3, |_, _| Ok(()))
            .unwrap();
        assert_eq!(resumed[0].epoch, 3);
        assert_eq!(resumed[1].epoch, 4);
    }
}
